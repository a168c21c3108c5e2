import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from mitodet import data as dm
from mitodet.boxgeom import BBox
from mitodet.errors import ConfigError, DatasetError


def write_manifest(tmp_path: Path, doc: dict) -> Path:
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc))
    return path


def make_image(tmp_path: Path, name="img.png", size=32) -> str:
    rng = np.random.default_rng(0)
    dm.save_image(tmp_path / name, rng.random((size, size, 3)))
    return name


class TestManifest:
    def minimal_doc(self, img_name):
        return {
            "domains": [{"id": 0, "name": "ScannerA", "role": "labeled_source"}],
            "images": [{"path": img_name, "domain": 0,
                        "annotations": [{"x_min": 1, "y_min": 2, "x_max": 9,
                                         "y_max": 10, "class": "mitotic_figure"}]}],
        }

    def test_minimal_manifest(self, tmp_path):
        doc = self.minimal_doc(make_image(tmp_path))
        table, records = dm.load_dataset(write_manifest(tmp_path, doc))
        assert len(table) == 1 and len(records) == 1
        assert records[0].annotations[0].class_id == 1
        assert records[0].annotations[0].box == BBox(1, 2, 9, 10)

    def test_unknown_class_named_in_error(self, tmp_path):
        doc = self.minimal_doc(make_image(tmp_path))
        doc["images"][0]["annotations"][0]["class"] = "mitosis"
        with pytest.raises(DatasetError, match="mitosis"):
            dm.load_dataset(write_manifest(tmp_path, doc))

    def test_unknown_field_rejected(self, tmp_path):
        doc = self.minimal_doc(make_image(tmp_path))
        doc["extra"] = 1
        with pytest.raises(DatasetError, match="extra"):
            dm.load_dataset(write_manifest(tmp_path, doc))

    def test_unknown_image_field_rejected(self, tmp_path):
        doc = self.minimal_doc(make_image(tmp_path))
        doc["images"][0]["split"] = "train"
        with pytest.raises(DatasetError, match="split"):
            dm.load_dataset(write_manifest(tmp_path, doc))

    def test_missing_image_file(self, tmp_path):
        doc = self.minimal_doc("nope.png")
        with pytest.raises(DatasetError, match="nope.png"):
            dm.load_dataset(write_manifest(tmp_path, doc))

    def test_non_dense_domain_ids(self, tmp_path):
        doc = self.minimal_doc(make_image(tmp_path))
        doc["domains"][0]["id"] = 1
        with pytest.raises(DatasetError, match="dense"):
            dm.load_dataset(write_manifest(tmp_path, doc))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DatasetError, match="not found"):
            dm.load_dataset(tmp_path / "absent.json")

    def test_scanner_role_split(self, tmp_path):
        # two labeled sources, one unlabeled source, one labeled target
        img = make_image(tmp_path)
        doc = {
            "domains": [
                {"id": 0, "name": "HamamatsuXR", "role": "labeled_source"},
                {"id": 1, "name": "HamamatsuS360", "role": "labeled_source"},
                {"id": 2, "name": "LeicaGT450", "role": "unlabeled_source"},
                {"id": 3, "name": "AperioCS2", "role": "labeled_target"},
            ],
            "images": [{"path": img, "domain": 0, "annotations": []}],
        }
        table, _ = dm.load_dataset(write_manifest(tmp_path, doc))
        assert table.role_ids(dm.LABELED_SOURCE) == [0, 1]
        assert table.role_ids(dm.UNLABELED_SOURCE) == [2]
        assert table.role_ids(dm.LABELED_TARGET) == [3]
        assert table.training_ids() == [0, 1]
        assert table.training_ids(include_unlabeled=True) == [0, 1, 2]

    def test_point_annotation_converted(self, tmp_path):
        doc = self.minimal_doc(make_image(tmp_path))
        doc["images"][0]["annotations"] = [{"x": 16, "y": 16, "class": "hard_negative"}]
        _, records = dm.load_dataset(write_manifest(tmp_path, doc), point_box_size=10)
        box = records[0].annotations[0].box
        assert box == BBox(11, 11, 21, 21)

    def test_annotation_clamped_to_image(self, tmp_path):
        doc = self.minimal_doc(make_image(tmp_path, size=32))
        doc["images"][0]["annotations"][0].update(x_min=-5, y_min=20, x_max=10, y_max=99)
        _, records = dm.load_dataset(write_manifest(tmp_path, doc))
        assert records[0].annotations[0].box == BBox(0, 20, 10, 32)

    def test_fully_outside_box_rejected(self, tmp_path):
        doc = self.minimal_doc(make_image(tmp_path, size=32))
        doc["images"][0]["annotations"][0].update(x_min=40, y_min=40, x_max=50, y_max=50)
        with pytest.raises(DatasetError, match="outside"):
            dm.load_dataset(write_manifest(tmp_path, doc))

    def test_save_manifest_round_trip(self, tmp_path):
        spec = dm.SynthSpec(num_domains=2, images_per_domain=3, patch_size=32, seed=1)
        out = tmp_path / "ds"
        table, records = dm.synth_dataset(spec, out)
        table2, records2 = dm.load_dataset(out / "manifest.json")
        assert len(records2) == len(records)
        for a, b in zip(records, records2):
            assert a.domain_id == b.domain_id
            assert len(a.annotations) == len(b.annotations)
            for x, y in zip(a.annotations, b.annotations):
                assert x.class_id == y.class_id
                np.testing.assert_allclose(x.box.as_array(), y.box.as_array())


class TestMinePatches:
    def test_centered_annotation(self):
        img = np.zeros((200, 200, 3), dtype=np.float32)
        ann = dm.Annotation(BBox(95, 95, 105, 105), 1)
        patches = dm.mine_patches(img, [ann], domain_id=0, patch_size=64)
        assert len(patches) == 1
        box = patches[0].annotations[0].box
        assert box.center == (32.0, 32.0)
        assert patches[0].image.shape == (64, 64, 3)

    def test_corner_annotation_clamped(self):
        img = np.zeros((200, 200, 3), dtype=np.float32)
        ann = dm.Annotation(BBox(2, 2, 10, 10), 0)
        patches = dm.mine_patches(img, [ann], domain_id=0, patch_size=64)
        box = patches[0].annotations[0].box
        # window clamps to the image corner, annotation keeps its position
        assert box == BBox(2, 2, 10, 10)

    def test_nearby_annotations_shared(self):
        img = np.zeros((300, 300, 3), dtype=np.float32)
        anns = [dm.Annotation(BBox(100, 100, 110, 110), 1),
                dm.Annotation(BBox(110, 100, 120, 110), 0)]
        patches = dm.mine_patches(img, anns, domain_id=0, patch_size=64)
        assert len(patches) == 2
        assert all(len(p.annotations) == 2 for p in patches)

    def test_image_too_small(self):
        with pytest.raises(ConfigError):
            dm.mine_patches(np.zeros((32, 32, 3)), [], domain_id=0, patch_size=64)

    def test_coverage_and_containment_on_synth(self):
        # every annotation survives into at least one patch, rebased boxes
        # stay inside the patch
        spec = dm.SynthSpec(num_domains=1, images_per_domain=4, patch_size=128,
                            cells_min=3, cells_max=7, seed=3)
        _, records = dm.synth_dataset(spec)
        for rec in records:
            patches = dm.mine_patches(rec.image, list(rec.annotations),
                                      domain_id=0, patch_size=48)
            assert len(patches) == len(rec.annotations)
            covered = 0
            for src in rec.annotations:
                found = False
                for p in patches:
                    for a in p.annotations:
                        assert 0 <= a.box.x_min < a.box.x_max <= 48
                        assert 0 <= a.box.y_min < a.box.y_max <= 48
                        if a.class_id == src.class_id and \
                                abs(a.box.width - min(src.box.width, 48)) < 48:
                            found = True
                covered += found
            assert covered == len(rec.annotations)


class TestComposeBatch:
    def make_records(self, counts):
        by_domain = {}
        for d, n in counts.items():
            by_domain[d] = [dm.PatchRecord(domain_id=d, annotations=(),
                                           image=np.zeros((4, 4, 3)))
                            for _ in range(n)]
        return by_domain

    def test_twelve_across_three(self):
        by_domain = self.make_records({0: 10, 1: 10, 2: 10})
        batch = dm.compose_batch(by_domain, batch_size=12, seed=0, step=0)
        assert len(batch) == 12
        per = [sum(1 for r in batch if r.domain_id == d) for d in (0, 1, 2)]
        assert per == [4, 4, 4]

    def test_indivisible_batch(self):
        by_domain = self.make_records({d: 5 for d in range(5)})
        with pytest.raises(ConfigError, match="divisible"):
            dm.compose_batch(by_domain, batch_size=12, seed=0, step=0)

    def test_empty_domain(self):
        by_domain = self.make_records({0: 5, 1: 0})
        with pytest.raises(ConfigError, match="no training records"):
            dm.compose_batch(by_domain, batch_size=4, seed=0, step=0)

    def test_deterministic(self):
        by_domain = self.make_records({0: 9, 1: 9})
        a = dm.compose_batch(by_domain, batch_size=6, seed=7, step=3)
        b = dm.compose_batch(by_domain, batch_size=6, seed=7, step=3)
        assert [id(r) for r in a] == [id(r) for r in b]

    def test_without_replacement_per_epoch(self):
        n = 9
        by_domain = self.make_records({0: n, 1: n})
        per = 3  # batch 6 over 2 domains
        epoch_steps = n // per
        for domain in (0, 1):
            seen = []
            for step in range(epoch_steps):
                batch = dm.compose_batch(by_domain, batch_size=6, seed=1, step=step)
                seen.extend(id(r) for r in batch if r.domain_id == domain)
            assert len(seen) == n
            assert len(set(seen)) == n  # each record exactly once per epoch

    def test_epoch_reshuffles(self):
        by_domain = self.make_records({0: 8, 1: 8})
        first = [id(r) for s in range(2)
                 for r in dm.compose_batch(by_domain, 8, seed=2, step=s)]
        second = [id(r) for s in range(2, 4)
                  for r in dm.compose_batch(by_domain, 8, seed=2, step=s)]
        assert sorted(first) == sorted(second)
        assert first != second


class TestSplit:
    def make(self, counts, roles):
        domains = tuple(dm.Domain(d, f"d{d}", roles[d]) for d in range(len(roles)))
        table = dm.DomainTable(domains)
        records = []
        for d, n in counts.items():
            records += [dm.PatchRecord(domain_id=d, annotations=(),
                                       image=np.zeros((4, 4, 3))) for _ in range(n)]
        return table, records

    def test_labeled_target_all_test(self):
        table, records = self.make({0: 20, 1: 10},
                                   ["labeled_source", "labeled_target"])
        out = dm.split_dataset(records, table, (0.5, 0.25, 0.25), seed=0)
        target = [r for r in out if r.domain_id == 1]
        assert all(r.split == "test" for r in target)

    def test_fraction_counts(self):
        table, records = self.make({0: 100}, ["labeled_source"])
        out = dm.split_dataset(records, table, (0.8, 0.1, 0.1), seed=0)
        counts = {s: sum(1 for r in out if r.split == s) for s in dm.SPLITS}
        assert counts == {"train": 80, "val": 10, "test": 10}

    def test_same_seed_same_split(self):
        table, records = self.make({0: 50}, ["labeled_source"])
        a = dm.split_dataset(records, table, seed=4)
        b = dm.split_dataset(records, table, seed=4)
        assert [r.split for r in a] == [r.split for r in b]

    def test_zero_train_warns(self):
        table, records = self.make({0: 3}, ["labeled_source"])
        with pytest.warns(UserWarning, match="no\\s+train"):
            dm.split_dataset(records, table, (0.0, 0.0, 1.0), seed=0)

    def test_bad_fractions(self):
        table, records = self.make({0: 3}, ["labeled_source"])
        with pytest.raises(ConfigError):
            dm.split_dataset(records, table, (0.5, 0.2, 0.2), seed=0)


class TestSynth:
    def test_zero_cells(self):
        spec = dm.SynthSpec(num_domains=1, images_per_domain=2, patch_size=32,
                            cells_min=0, cells_max=0, seed=0)
        _, records = dm.synth_dataset(spec)
        assert all(len(r.annotations) == 0 for r in records)

    def test_checksum_determinism(self, tmp_path):
        spec = dm.SynthSpec(num_domains=2, images_per_domain=3, patch_size=32, seed=9)
        dm.synth_dataset(spec, tmp_path / "a")
        dm.synth_dataset(spec, tmp_path / "b")
        for p in sorted((tmp_path / "a" / "images").iterdir()):
            q = tmp_path / "b" / "images" / p.name
            assert hashlib.sha256(p.read_bytes()).hexdigest() == \
                hashlib.sha256(q.read_bytes()).hexdigest()

    def test_domain_color_separation(self):
        spec = dm.SynthSpec(num_domains=3, images_per_domain=12, patch_size=32, seed=5)
        _, records = dm.synth_dataset(spec)
        means, stds = {}, {}
        for d in range(3):
            per_image = np.stack([r.image.mean(axis=(0, 1))
                                  for r in records if r.domain_id == d])
            means[d] = per_image.mean(axis=0)
            stds[d] = per_image.std(axis=0)
        for a in range(3):
            for b in range(a + 1, 3):
                gap = np.abs(means[a] - means[b]).max()
                spread = max(stds[a].max(), stds[b].max())
                assert gap > spread, f"domains {a},{b} not separated"

    def test_annotation_boxes_inside_image(self):
        spec = dm.SynthSpec(num_domains=2, images_per_domain=6, patch_size=48, seed=6)
        _, records = dm.synth_dataset(spec)
        total = 0
        for r in records:
            for a in r.annotations:
                assert 0 <= a.box.x_min < a.box.x_max <= 48
                assert 0 <= a.box.y_min < a.box.y_max <= 48
                total += 1
        assert total > 0

    def test_both_classes_present(self):
        spec = dm.SynthSpec(num_domains=2, images_per_domain=10, patch_size=48, seed=7)
        _, records = dm.synth_dataset(spec)
        classes = {a.class_id for r in records for a in r.annotations}
        assert classes == {0, 1}

    def test_per_domain_image_counts(self):
        spec = dm.SynthSpec(num_domains=3, images_per_domain=(4, 2, 1),
                            patch_size=32, seed=0)
        _, records = dm.synth_dataset(spec)
        counts = [sum(1 for r in records if r.domain_id == d) for d in range(3)]
        assert counts == [4, 2, 1]

    def test_invalid_spec(self):
        with pytest.raises(ConfigError):
            dm.SynthSpec(num_domains=0)
        with pytest.raises(ConfigError):
            dm.SynthSpec(cells_min=5, cells_max=2)
        with pytest.raises(ConfigError):
            dm.SynthSpec(num_domains=2, roles=("labeled_source",))
