"""Hand-built class vocabularies and annotation sets shared by the unit and acceptance tests."""
from collections import Counter

from vinvl.odcorpus import ClassEntry, DatasetSpec, Sampling


def entry(name, aliases=(), ds="vg", n=0):
    return ClassEntry(name, frozenset(aliases), ds, n)


def alias_fixture():
    """Base plus three externals; the expected merge is enumerated by hand below."""
    base = [entry("person", ["man", "woman"], n=100), entry("cat", ["kitty"], n=50), entry("dog", n=40),
            entry("unicorn", n=5), entry("cup", ["mug"], n=30), entry("zebra", n=29)]
    coco = [entry("Man", ds="coco", n=7), entry("cat", ds="coco", n=3), entry("couch", ds="coco", n=4),
            entry("zebra", ds="coco", n=2), entry("mug", ds="coco", n=1)]
    objects365 = [entry("kitty", ds="objects365", n=6), entry("sofa", ["couch"], ds="objects365", n=5),
                  entry("unicorn", ds="objects365", n=9), entry("Dog ", ds="objects365", n=8)]
    openimages = [entry("Zebra", ds="openimages", n=11), entry("automobile", ["car"], ds="openimages", n=12)]
    return base, [coco, objects365, openimages]


EXPECTED_MERGE = [
    # canonical, aliases, provenance, instances, from_base
    ("person", {"person", "man", "woman"}, "vg:0,coco:0", 107, True),
    ("cat", {"cat", "kitty"}, "vg:1,coco:1,objects365:0", 59, True),
    ("dog", {"dog"}, "vg:2,objects365:3", 48, True),
    ("cup", {"cup", "mug"}, "vg:4,coco:4", 31, True),
    ("couch", {"couch", "sofa"}, "coco:2,objects365:1", 9, False),
    ("zebra", {"zebra"}, "coco:3,openimages:0", 13, False),
    ("unicorn", {"unicorn"}, "objects365:2", 9, False),
    ("automobile", {"automobile", "car"}, "openimages:1", 12, False),
]


def three_class_spec():
    """500 images: class 2 in each, class 1 in every tenth, class 0 in every hundredth (5, 50, 500 instances)."""
    records = []
    for i in range(500):
        anns = [(2, None)]
        if i % 10 == 0:
            anns.append((1, None))
        if i % 100 == 0:
            anns.append((0, None))
        records.append((f"im{i:03d}", anns))
    return DatasetSpec("fixture", records, Sampling.class_aware(min_per_class=100))


QUOTA = 100


def brute_force_counts(spec, image_ids):
    table = dict(spec.image_records)
    counts = Counter()
    for iid in image_ids:
        for cid, _ in table[iid]:
            counts[cid] += 1
    return counts
