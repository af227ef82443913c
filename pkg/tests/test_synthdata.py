import json

import numpy as np
import pytest

from midre import synthdata
from midre.errors import ConfigError, FormatError, InvariantError


def knn_accuracy(train, test, k=3):
    """Plain pixel-space k-NN, majority vote with nearest-first tie break."""
    a = train.data.reshape(len(train), -1).astype(np.float64)
    b = test.data.reshape(len(test), -1).astype(np.float64)
    d = ((b ** 2).sum(1)[:, None] - 2 * b @ a.T + (a ** 2).sum(1)[None])
    nearest = np.argsort(d, axis=1)[:, :k]
    correct = 0
    for row, lab in zip(nearest, test.labels):
        votes = train.labels[row]
        counts = np.bincount(votes)
        best = np.flatnonzero(counts == counts.max())
        pred = next(v for v in votes if v in best)
        correct += pred == lab
    return correct / len(test)


def test_knn_separability_floor():
    bundle = synthdata.generate_synthfaces(32, 20, (32, 32, 3), seed=7)
    train, test = synthdata.split_train_test(bundle.private, 5)
    assert knn_accuracy(train, test) > 0.9


def test_deterministic_and_seed_sensitive():
    a = synthdata.generate_synthfaces(4, 5, (16, 16, 3), seed=3)
    b = synthdata.generate_synthfaces(4, 5, (16, 16, 3), seed=3)
    c = synthdata.generate_synthfaces(4, 5, (16, 16, 3), seed=4)
    assert a == b
    assert a != c


def test_bundle_invariants(tiny_bundle):
    assert not set(tiny_bundle.private_identities) & set(tiny_bundle.public_identities)
    for split in (tiny_bundle.private, tiny_bundle.public):
        assert split.data.shape == (24, 3, 16, 16)
        assert split.data.min() >= 0 and split.data.max() <= 1
        assert sorted(set(split.labels.tolist())) == [0, 1, 2, 3]


@pytest.mark.parametrize("args", [(1, 5, (16, 16, 3)), (4, 1, (16, 16, 3)), (4, 5, (8, 16, 3))])
def test_invalid_sizes(args):
    with pytest.raises(ConfigError):
        synthdata.generate_synthfaces(*args)


def test_split_train_test_holds_out_tail(tiny_bundle):
    train, test = synthdata.split_train_test(tiny_bundle.private, 2)
    assert len(train) == 16 and len(test) == 8
    assert np.bincount(test.labels).tolist() == [2, 2, 2, 2]
    with pytest.raises(ConfigError):
        synthdata.split_train_test(tiny_bundle.private, 6)


def test_save_load_roundtrip(tmp_path, tiny_bundle):
    synthdata.save_dataset(tiny_bundle, tmp_path)
    assert synthdata.load_dataset(tmp_path) == tiny_bundle
    n, c, h, w = tiny_bundle.private.data.shape
    assert (tmp_path / "private" / "images.bin").stat().st_size == n * c * h * w * 4
    meta = json.loads((tmp_path / "private" / "meta.json").read_text())
    assert {k: meta[k] for k in ("width", "height", "channels", "num_identities", "samples_per_identity",
                                 "seed", "role", "format_version")} == {
        "width": 16, "height": 16, "channels": 3, "num_identities": 4, "samples_per_identity": 6,
        "seed": 11, "role": "private", "format_version": 1}
    raw = np.fromfile(tmp_path / "private" / "images.bin", dtype="<f4")
    assert raw.tobytes() == tiny_bundle.private.data.astype("<f4").tobytes()


def test_truncated_images_named_in_error(tmp_path, tiny_bundle):
    synthdata.save_dataset(tiny_bundle, tmp_path)
    f = tmp_path / "private" / "images.bin"
    size = f.stat().st_size
    f.write_bytes(f.read_bytes()[:-8])
    with pytest.raises(FormatError, match=f"expected {size} bytes, found {size - 8}"):
        synthdata.load_dataset(tmp_path)


def test_out_of_range_label_and_nan(tmp_path, tiny_bundle):
    synthdata.save_dataset(tiny_bundle, tmp_path)
    labels = np.fromfile(tmp_path / "public" / "labels.bin", dtype="<u4")
    labels[0] = 4
    labels.tofile(tmp_path / "public" / "labels.bin")
    with pytest.raises(InvariantError):
        synthdata.load_dataset(tmp_path)
    synthdata.save_dataset(tiny_bundle, tmp_path)
    data = np.fromfile(tmp_path / "private" / "images.bin", dtype="<f4")
    data[5] = np.nan
    data.tofile(tmp_path / "private" / "images.bin")
    with pytest.raises(InvariantError):
        synthdata.load_dataset(tmp_path)


def test_corrupt_meta(tmp_path, tiny_bundle):
    synthdata.save_dataset(tiny_bundle, tmp_path)
    (tmp_path / "private" / "meta.json").write_text("{not json")
    with pytest.raises(FormatError):
        synthdata.load_dataset(tmp_path)


def test_channel_means(tiny_bundle):
    means = synthdata.channel_means(tiny_bundle.private)
    assert len(means) == 3
    assert means[0] == pytest.approx(float(tiny_bundle.private.data[:, 0].mean()), abs=1e-6)
