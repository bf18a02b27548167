import json

import numpy as np
import pytest

from vinvl.odcorpus import read_alias_file, read_annotations
from vinvl.regions import iou, read_feature_file
from vinvl.synthetic import (BASE_SCALE, EXTERNAL_ONLY, HUMAN_ANSWERERS, RARE_BASE, SyntheticWorld, detection_datasets,
                             detector_outputs, generate_image, generate_synthetic_corpus)


@pytest.fixture(scope="module")
def world():
    return SyntheticWorld.make(seed=3, n_concepts=10, n_colors=6, appearance_dim=16)


class TestWorld:
    def test_same_seed_same_world(self):
        a, b = SyntheticWorld.make(seed=1), SyntheticWorld.make(seed=1)
        np.testing.assert_array_equal(a.concept_protos, b.concept_protos)
        assert not np.array_equal(a.concept_protos, SyntheticWorld.make(seed=2).concept_protos)

    def test_json_roundtrip(self, world):
        back = SyntheticWorld.from_json(json.loads(json.dumps(world.to_json())))
        np.testing.assert_array_equal(back.color_protos, world.color_protos)
        assert back.concepts == world.concepts and back.noise == world.noise

    def test_too_many_concepts(self):
        with pytest.raises(ValueError):
            SyntheticWorld.make(n_concepts=1000)

    def test_appearance_is_prototype_plus_noise(self, world):
        samples = np.stack([world.appearance(2, 1, np.random.default_rng(i)) for i in range(2000)])
        expected = world.concept_protos[2] + world.color_scale * world.color_protos[1]
        np.testing.assert_allclose(samples.mean(axis=0), expected, atol=5 * world.noise / np.sqrt(2000))


class TestImages:
    def test_caption_mentions_present_concepts(self, world):
        for i in range(200):
            img = generate_image(world, i, 5)
            present = {o.concept for o in img.objects}
            words = set(img.caption.split())
            assert len(words & present) >= 1
            assert world.min_objects <= len(img.objects) <= world.max_objects

    def test_objects_barely_overlap(self, world):
        img = generate_image(world, 4, 0)
        for i, a in enumerate(img.objects):
            for b in img.objects[i + 1:]:
                assert iou(a.box, b.box) < 0.1

    def test_qa_answers(self, world):
        for i in range(50):
            img = generate_image(world, i, 1)
            color, presence = img.qa
            target = color["question"].split()[-2]
            assert color["answer"] in {o.color for o in img.objects if o.concept == target}
            assert sum(color["answer_counts"].values()) == HUMAN_ANSWERERS
            asked = presence["question"].split()[-2]
            assert (presence["answer"] == "yes") == (asked in {o.concept for o in img.objects})

    def test_detector_duplicates(self, world):
        img = generate_image(world, 0, 2)
        dets = detector_outputs(world, img, 2)
        assert len(dets.detections) == 4 * len(img.objects)
        best = max(dets.detections, key=lambda d: d.score)
        assert any(o.box == best.box for o in img.objects)


class TestDatasets:
    def test_structure(self, world):
        data = detection_datasets(world, 0, images_per_dataset=20)
        assert sorted(data) == ["coco", "objects365", "openimages", "vg"]
        base_names = [c.canonical_name for c in data["vg"][0]]
        assert base_names[-len(RARE_BASE):] == RARE_BASE
        assert len(data["vg"][1]) == BASE_SCALE * 20
        ext = {c.canonical_name for n in ("coco", "objects365", "openimages") for c in data[n][0]}
        assert set(EXTERNAL_ONLY) <= ext


class TestCorpusFiles:
    def test_empty_corpus_is_valid(self, world, tmp_path):
        paths = generate_synthetic_corpus(world, 0, 0, tmp_path, od_images_per_dataset=5)
        assert paths["images"].read_text() == ""
        names, _, images = read_feature_file(paths["detections"])
        assert images == [] and names == world.concepts

    def test_byte_identical_reruns(self, world, tmp_path):
        a = generate_synthetic_corpus(world, 12, 4, tmp_path / "a", od_images_per_dataset=5)
        b = generate_synthetic_corpus(world, 12, 4, tmp_path / "b", od_images_per_dataset=5)
        for key in a:
            assert a[key].read_bytes() == b[key].read_bytes(), key

    def test_od_files_readable(self, world, tmp_path):
        generate_synthetic_corpus(world, 1, 0, tmp_path, od_images_per_dataset=5)
        classes = read_alias_file(tmp_path / "od" / "coco.aliases", "coco")
        records = read_annotations(tmp_path / "od" / "coco.jsonl")
        assert classes and len(records) == 5
