"""The whole CLI surface end to end: synth -> train -> evaluate -> infer ->
plot-pr, all through the same entry points the installed `mitodet` command
uses.

Run: python demos/05_cli_round_trip.py [workdir]
"""

import json
import sys
from pathlib import Path

from mitodet import cli

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_out/cli")
work.mkdir(parents=True, exist_ok=True)
data = work / "dataset"
run = work / "run"

steps = [
    ["synth", "--out", str(data), "--seed", "42", "--domains", "3",
     "--images", "10", "--size", "64"],
]

config = {
    "unet_depth": 3, "unet_base_channels": 8, "detector_channels": 32,
    "domain_head_channels": 16, "extractor_channels": [8, 16, 32],
    "extractor_gain": 12.0, "grl_strength": 2.0,
    "batch_size": 4, "learning_rate": 1e-3, "max_steps": 60, "seed": 42,
    "split_train": 0.8, "split_val": 0.0, "split_test": 0.2,
}
(work / "config.json").write_text(json.dumps(config, indent=2))

steps += [
    ["train", "--config", str(work / "config.json"),
     "--data", str(data / "manifest.json"), "--out", str(run)],
    ["evaluate", "--ckpt", str(run / "checkpoint_final.bin"),
     "--data", str(data / "manifest.json"), "--split", "test",
     "--out", str(work / "metrics.csv"), "--pr", str(work / "pr.csv")],
    ["plot-pr", str(work / "pr.csv"), "--out", str(work / "pr.svg")],
]

for argv in steps:
    print(f"\n$ mitodet {' '.join(argv)}")
    rc = cli.main(argv)
    assert rc == 0, f"command failed with exit code {rc}"

image = sorted((data / "images").glob("*.png"))[0]
argv = ["infer", "--ckpt", str(run / "checkpoint_final.bin"),
        "--image", str(image), "--out", str(work / "overlay.png"),
        "--json", str(work / "dets.json"),
        "--homogenized", str(work / "homogenized.png")]
print(f"\n$ mitodet {' '.join(argv)}")
assert cli.main(argv) == 0

print(f"\nartifacts in {work}:")
for p in sorted(work.rglob("*")):
    if p.is_file():
        print("  ", p.relative_to(work))
