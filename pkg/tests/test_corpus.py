import numpy as np
import pytest

from vinvl.corpus import (DEFAULT_QA_RATE, DEFAULT_TAG_RATE, FeatureStore, TripleRecord, build_task_files,
                          build_token_vocab, build_triples, load_triples, read_jsonl, region_tags, write_jsonl)
from vinvl.regions import BoundingBox, ImageDetections, ScoredDetection, write_feature_file
from vinvl.synthetic import SyntheticWorld, detector_outputs, generate_image

CLASSES = ["cat", "dog", "cup"]


def image_record(i, objects=(("cat", "red"), ("dog", "blue"))):
    return {"image_id": f"img{i}", "caption": f"a red cat {i}", "tagging_caption": "a photo of a cat",
            "objects": [{"concept": c, "color": k} for c, k in objects],
            "qa": [{"question": "what color is the cat ?", "answer": "red", "answer_counts": {"red": 9, "blue": 1},
                    "type": "color"},
                   {"question": "is there a dog ?", "answer": "yes", "answer_counts": {"yes": 10},
                    "type": "presence"}]}


def detections(i, classes=(1, 0)):
    dets = [ScoredDetection(BoundingBox(0, 0, 5 + k, 5), c, 0.9 - 0.1 * k, np.full(3, float(k)))
            for k, c in enumerate(classes)]
    return ImageDetections(f"img{i}", 10.0, 10.0, dets)


class TestRecords:
    def test_json_roundtrip(self):
        r = TripleRecord("a/cap", "caption", "a cat", "cat dog", "f.bin", "a")
        assert TripleRecord.from_json(r.to_json()) == r

    def test_list_q_joined(self):
        d = TripleRecord("x", "tag", "w", "", "f", "i").to_json()
        d["q"] = ["cat", "dog"]
        assert TripleRecord.from_json(d).q == "cat dog"

    def test_unknown_kind(self):
        d = TripleRecord("x", "tag", "w", "q", "f", "i").to_json()
        d["kind"] = "poem"
        with pytest.raises(ValueError):
            TripleRecord.from_json(d)

    def test_jsonl_roundtrip(self, tmp_path):
        rows = [{"b": 1, "a": "ü"}, {"c": [1, 2]}]
        write_jsonl(tmp_path / "x.jsonl", rows)
        assert read_jsonl(tmp_path / "x.jsonl") == rows


class TestTriples:
    def test_tags_follow_detection_order(self):
        assert region_tags(detections(0), CLASSES) == "dog cat"

    def test_every_image_gets_a_caption_triple(self):
        images = [image_record(i) for i in range(30)]
        regions = {f"img{i}": detections(i) for i in range(30)}
        triples = build_triples(images, regions, CLASSES, "r.bin", rng_seed=1)
        caps = [t for t in triples if t.kind == "caption"]
        assert [t.image_id for t in caps] == [f"img{i}" for i in range(30)]
        assert all(t.q == "dog cat" for t in caps)

    def test_presence_questions_excluded(self):
        images = [image_record(i) for i in range(20)]
        regions = {f"img{i}": detections(i) for i in range(20)}
        triples = build_triples(images, regions, CLASSES, "r.bin", qa_rate=1.0, tag_rate=1.0)
        qa = [t for t in triples if t.kind == "qa"]
        assert len(qa) == 20 and all(t.w.startswith("what color") for t in qa)
        tags = [t for t in triples if t.kind == "tag"]
        assert len(tags) == 20 and tags[0].q == "cat dog"

    def test_mix_rates(self):
        n = 4000
        images = [image_record(i) for i in range(n)]
        regions = {f"img{i}": detections(i) for i in range(n)}
        triples = build_triples(images, regions, CLASSES, "r.bin", rng_seed=3)
        assert sum(t.kind == "qa" for t in triples) / n == pytest.approx(DEFAULT_QA_RATE, abs=0.03)
        assert sum(t.kind == "tag" for t in triples) / n == pytest.approx(DEFAULT_TAG_RATE, abs=0.03)

    def test_deterministic(self):
        images = [image_record(i) for i in range(10)]
        regions = {f"img{i}": detections(i) for i in range(10)}
        assert build_triples(images, regions, CLASSES, "r", rng_seed=4) == \
            build_triples(images, regions, CLASSES, "r", rng_seed=4)


class TestTasks:
    def setup_method(self):
        world = SyntheticWorld.make(seed=0, n_concepts=8, appearance_dim=6)
        self.classes = world.concepts
        imgs = [generate_image(world, i, 0) for i in range(25)]
        self.images = [im.record() for im in imgs]
        self.regions = {im.image_id: detector_outputs(world, im, 0) for im in imgs}
        self.tasks = build_task_files(self.images, self.regions, world.concepts, 0)

    def test_counts(self):
        assert len(self.tasks["vqa"]) == 50
        assert all(len(self.tasks[t]) == 25 for t in ("gqa", "caption", "retrieval", "nlvr2"))

    def test_nlvr2_labels_are_true(self):
        by_id = {im["image_id"]: {o["concept"] for o in im["objects"]} for im in self.images}
        for rec in self.tasks["nlvr2"]:
            concept = rec["statement"].split()[-2]
            a, b = rec["image_ref_pair"]
            assert a != b
            assert rec["label"] == (concept in by_id[a] and concept in by_id[b])

    def test_vocab_covers_every_text(self):
        triples = build_triples(self.images, self.regions, self.classes, "r.bin")
        vocab = build_token_vocab(triples, self.tasks)
        for rec in self.tasks["vqa"]:
            assert all(w in vocab.index for w in rec["question"].split())
            assert all(a in vocab.index for a in rec["answers"])


class TestFeatureStore:
    def test_load_triples(self, tmp_path):
        write_feature_file(tmp_path / "r.bin", [detections(0), detections(1, (2,))], CLASSES, 3)
        store = FeatureStore(tmp_path)
        recs = [TripleRecord("img1/cap", "caption", "a cup", "cup", "r.bin", "img1")]
        vocab = build_token_vocab(recs, {})
        (t,) = load_triples(recs, store, vocab)
        assert t.w == (vocab["a"], vocab["cup"]) and t.q == (vocab["cup"],)
        assert t.regions.shape == (1, 3 + 6) and t.kind == "caption" and t.id == "img1/cap"
        np.testing.assert_allclose(t.regions[0, 3:], [0, 0, 0.5, 0.5, 0.5, 0.5])
