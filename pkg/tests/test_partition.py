import numpy as np
import pytest

from mmoe.data import LabeledDataset
from mmoe.partition import (DuplicateClassError, EmptySuperclassError, MapFormatError, MissingClassError,
                            PartitionError, SuperclassMap, load_superclass_map, parse_superclass_map,
                            relabel_superclass, restrict_to_superclass)

MNIST_MAP = "# digits\n" + "".join(f"{d}\t{int(d >= 5)}\n" for d in range(10))


def _ds(labels):
    labels = np.asarray(labels)
    return LabeledDataset(np.arange(len(labels), dtype=np.float32).reshape(-1, 1, 1, 1), labels)


def test_mnist_map(tmp_path):
    path = tmp_path / "map.tsv"
    path.write_text(MNIST_MAP)
    smap = load_superclass_map(path, 10)
    assert smap.n_superclasses == 2 and smap.sizes() == (5, 5)
    assert smap.local_to_global(1) == (5, 6, 7, 8, 9)


def test_missing_class():
    text = "".join(f"{d}\t{int(d >= 5)}\n" for d in range(10) if d != 7)
    with pytest.raises(MissingClassError, match="7"):
        parse_superclass_map(text)


def test_missing_trailing_class_needs_count():
    text = "".join(f"{d}\t{int(d >= 5)}\n" for d in range(9))
    with pytest.raises(MissingClassError, match="9"):
        parse_superclass_map(text, n_classes=10)


def test_duplicate_class():
    with pytest.raises(DuplicateClassError):
        parse_superclass_map(MNIST_MAP + "3\t1\n")


def test_empty_superclass():
    with pytest.raises(EmptySuperclassError):
        parse_superclass_map("0\t0\n1\t2\n")


def test_malformed_line():
    with pytest.raises(MapFormatError):
        parse_superclass_map("0\tzero\n")


def test_errors_are_distinct():
    kinds = [DuplicateClassError, MissingClassError, EmptySuperclassError]
    assert all(issubclass(k, PartitionError) for k in kinds)
    assert len(set(kinds)) == 3 and not any(issubclass(a, b) for a in kinds for b in kinds if a is not b)


def test_split_517_483():
    pairs = [(c, int(c >= 517)) for c in range(1000)]
    smap = SuperclassMap.from_assignment(pairs, 1000)
    assert smap.n_superclasses == 2 and smap.sizes() == (517, 483)


def test_text_round_trip():
    smap = SuperclassMap(((0, 4), (1, 2, 3)))
    assert parse_superclass_map(smap.to_text()) == smap


def test_relabel():
    smap = parse_superclass_map(MNIST_MAP)
    out = relabel_superclass(_ds([0, 7, 3]), smap)
    np.testing.assert_array_equal(out.labels, [0, 1, 0])


def test_relabel_identity_and_conservation():
    labels = np.random.default_rng(0).integers(0, 6, 50)
    ident = SuperclassMap(tuple((c,) for c in range(6)))
    ds = _ds(labels)
    np.testing.assert_array_equal(relabel_superclass(ds, ident).labels, labels)
    coarse = relabel_superclass(ds, SuperclassMap.contiguous([2, 4]))
    assert np.bincount(coarse.labels).sum() == len(labels)
    assert coarse.images is ds.images


def test_relabel_uncovered_label():
    with pytest.raises(MissingClassError):
        relabel_superclass(_ds([0, 5]), SuperclassMap.contiguous([2, 2]))


def test_restrict_mnist_upper():
    smap = parse_superclass_map(MNIST_MAP)
    ds = _ds(np.arange(20) % 10)
    sub, members, index = restrict_to_superclass(ds, smap, 1)
    assert members == (5, 6, 7, 8, 9)
    np.testing.assert_array_equal(sub.labels, [0, 1, 2, 3, 4, 0, 1, 2, 3, 4])
    np.testing.assert_array_equal(index, [5, 6, 7, 8, 9, 15, 16, 17, 18, 19])


def test_restrict_partition_and_round_trip():
    smap = SuperclassMap(((0, 3, 5), (1,), (2, 4)))
    labels = np.random.default_rng(1).integers(0, 6, 200)
    ds = _ds(labels)
    seen = []
    for i in range(smap.n_superclasses):
        sub, members, index = restrict_to_superclass(ds, smap, i)
        assert len(sub) > 0
        np.testing.assert_array_equal(np.asarray(members)[sub.labels], labels[index])
        np.testing.assert_array_equal(sub.images, ds.images[index])
        seen.extend(index.tolist())
    assert sorted(seen) == list(range(len(ds)))


def test_restrict_bad_id():
    with pytest.raises(PartitionError):
        restrict_to_superclass(_ds([0, 1]), SuperclassMap.contiguous([1, 1]), 2)
