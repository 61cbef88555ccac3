"""Dataset plumbing: binary format parsers against hand-built byte
fixtures, verified fetching with a fake transport, augmentation
identities, and corruption synthesis statistics."""

import gzip
import hashlib
import json
import struct

import numpy as np
import pytest

from nevo.data import (Dataset, SEVERITY_TABLES, augment, batches, corrupt,
                       fetch, load_cifar10, load_idx, load_idx_dir, load_npy,
                       make_synthetic, make_synthetic_pair, save_npy)
from nevo.errors import (ChecksumError, ConfigError, DataFormatError,
                         MissingArtifactError, NevoError,
                         UnsupportedCorruptionError)
from nevo.rng import RngStream


def idx_images_bytes(arr):
    arr = np.asarray(arr, dtype=np.uint8)
    head = struct.pack(">I", 2051)
    dims = b"".join(struct.pack(">I", d) for d in arr.shape)
    return head + dims + arr.tobytes()


def idx_labels_bytes(labels):
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">I", 2049) + struct.pack(">I", len(labels)) + labels.tobytes()


@pytest.fixture
def idx_pair(tmp_path):
    images = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    labels = np.array([1, 0], dtype=np.uint8)
    ip = tmp_path / "imgs"
    lp = tmp_path / "labs"
    ip.write_bytes(idx_images_bytes(images))
    lp.write_bytes(idx_labels_bytes(labels))
    return ip, lp, images, labels


def test_load_idx_values_and_scaling(idx_pair):
    ip, lp, images, labels = idx_pair
    ds = load_idx(ip, lp, "fix")
    assert ds.images.shape == (2, 1, 3, 4)
    assert ds.images.dtype == np.float32
    np.testing.assert_allclose(ds.images[:, 0], images / 255.0, atol=1e-7)
    assert np.array_equal(ds.labels, labels.astype(np.int64))
    assert ds.name == "fix"


def test_load_idx_bad_magic(idx_pair, tmp_path):
    ip, lp, *_ = idx_pair
    bad = tmp_path / "bad"
    bad.write_bytes(b"\x00\x00\x09\x03" + ip.read_bytes()[4:])
    with pytest.raises(DataFormatError) as exc:
        load_idx(bad, lp)
    assert "magic" in str(exc.value)


def test_load_idx_truncated_and_trailing(idx_pair, tmp_path):
    ip, lp, *_ = idx_pair
    blob = ip.read_bytes()
    short = tmp_path / "short"
    short.write_bytes(blob[:-3])
    with pytest.raises(DataFormatError) as exc:
        load_idx(short, lp)
    assert "truncated" in str(exc.value)
    longer = tmp_path / "long"
    longer.write_bytes(blob + b"\x00\x00")
    with pytest.raises(DataFormatError) as exc:
        load_idx(longer, lp)
    assert "trailing" in str(exc.value)


def test_load_idx_count_mismatch(idx_pair, tmp_path):
    ip, _, _, _ = idx_pair
    lp3 = tmp_path / "labs3"
    lp3.write_bytes(idx_labels_bytes([0, 1, 2]))
    with pytest.raises(DataFormatError) as exc:
        load_idx(ip, lp3)
    assert "N=2" in str(exc.value) and "N=3" in str(exc.value)


def test_load_idx_missing_file(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_idx(tmp_path / "nope", tmp_path / "nope2")


@pytest.mark.parametrize("dtype", [np.uint8, np.float32, np.float64,
                                   np.int32, np.int64])
def test_npy_round_trip_bitwise(tmp_path, dtype):
    gen = np.random.default_rng(0)
    arr = (gen.integers(0, 200, (3, 4, 5)) if np.issubdtype(dtype, np.integer)
           else gen.normal(size=(3, 4, 5)) * 100).astype(dtype)
    p = tmp_path / "a.npy"
    save_npy(p, arr)
    back = load_npy(p, scale_u8=False)
    assert back.dtype == arr.dtype
    assert np.array_equal(back, arr)


def test_npy_interchange_with_numpy_writer(tmp_path):
    arr = np.array([[1, 2], [3, 4]], dtype=np.int64)
    p = tmp_path / "np.npy"
    np.save(p, arr)
    assert np.array_equal(load_npy(p), arr)
    q = tmp_path / "ours.npy"
    save_npy(q, arr)
    assert np.array_equal(np.load(q), arr)


def test_npy_u8_scaling_toggle(tmp_path):
    arr = np.array([0, 51, 255], dtype=np.uint8)
    p = tmp_path / "u8.npy"
    save_npy(p, arr)
    scaled = load_npy(p)
    assert scaled.dtype == np.float32
    np.testing.assert_allclose(scaled, [0.0, 0.2, 1.0])
    raw = load_npy(p, scale_u8=False)
    assert np.array_equal(raw, arr)


def npy_v1_bytes(header, payload):
    head = header.encode("latin1")
    return b"\x93NUMPY\x01\x00" + len(head).to_bytes(2, "little") + head + payload


def test_npy_rejects_malformed(tmp_path):
    cases = {
        "fortran": ("{'descr': '<f4', 'fortran_order': True, 'shape': (1,)}",
                    b"\x00" * 4),
        "dtype": ("{'descr': '>f8', 'fortran_order': False, 'shape': (1,)}",
                  b"\x00" * 8),
        "extrakey": ("{'descr': '<f4', 'fortran_order': False, 'shape': (1,),"
                     " 'x': 1}", b"\x00" * 4),
        "shape": ("{'descr': '<f4', 'fortran_order': False, 'shape': [1]}",
                  b"\x00" * 4),
        "short": ("{'descr': '<f4', 'fortran_order': False, 'shape': (9,)}",
                  b"\x00" * 4),
        "trailing": ("{'descr': '<f4', 'fortran_order': False, 'shape': (1,)}",
                     b"\x00" * 9),
        "syntax": ("{'descr': ", b""),
    }
    for name, (header, payload) in cases.items():
        p = tmp_path / f"{name}.npy"
        p.write_bytes(npy_v1_bytes(header, payload))
        with pytest.raises(DataFormatError):
            load_npy(p)
    bad_magic = tmp_path / "magic.npy"
    bad_magic.write_bytes(b"NOTNPY\x01\x00" + b"\x00" * 16)
    with pytest.raises(DataFormatError):
        load_npy(bad_magic)
    bad_ver = tmp_path / "ver.npy"
    bad_ver.write_bytes(b"\x93NUMPY\x09\x00" + b"\x00" * 16)
    with pytest.raises(DataFormatError):
        load_npy(bad_ver)


def test_cifar10_parsing(tmp_path):
    gen = np.random.default_rng(1)
    pixels = gen.integers(0, 256, (2, 3072), dtype=np.uint8)
    rec = np.concatenate([np.array([[3], [9]], dtype=np.uint8), pixels],
                         axis=1)
    p = tmp_path / "batch.bin"
    p.write_bytes(rec.tobytes())
    ds = load_cifar10(p)
    assert ds.images.shape == (2, 3, 32, 32)
    assert np.array_equal(ds.labels, [3, 9])
    np.testing.assert_allclose(ds.images.reshape(2, -1),
                               pixels / 255.0, atol=1e-7)


def test_cifar10_rejects_bad_label_and_size(tmp_path):
    bad = tmp_path / "bad.bin"
    rec = bytearray(3073)
    rec[0] = 11
    bad.write_bytes(bytes(rec))
    with pytest.raises(DataFormatError) as exc:
        load_cifar10(bad)
    assert "11" in str(exc.value)
    odd = tmp_path / "odd.bin"
    odd.write_bytes(b"\x00" * 100)
    with pytest.raises(DataFormatError):
        load_cifar10(odd)


def fake_dataset_files():
    images = idx_images_bytes(np.zeros((2, 4, 4), dtype=np.uint8))
    labels = idx_labels_bytes([0, 1])
    return {
        "train-images-idx3-ubyte": images,
        "train-labels-idx1-ubyte": labels,
        "t10k-images-idx3-ubyte": images,
        "t10k-labels-idx1-ubyte": labels,
    }


def fake_manifest(files, pin=True):
    entries = {}
    for logical, payload in files.items():
        gz = gzip.compress(payload)
        entries[logical] = {
            "gz": logical + ".gz",
            "sha256": hashlib.sha256(gz).hexdigest() if pin else None,
        }
    return {"tiny": {"base_url": "http://example.invalid/", "files": entries}}


class CountingOpener:
    def __init__(self, files, corrupt_urls=()):
        self.files = files
        self.corrupt_urls = set(corrupt_urls)
        self.calls = []

    def __call__(self, url):
        self.calls.append(url)
        name = url.rsplit("/", 1)[1][:-3]
        blob = gzip.compress(self.files[name])
        if url in self.corrupt_urls:
            blob = blob[:-1] + bytes([blob[-1] ^ 0xFF])
        return blob


def test_fetch_downloads_verifies_and_caches(tmp_path):
    files = fake_dataset_files()
    manifest = fake_manifest(files)
    opener = CountingOpener(files)
    out = fetch("tiny", out_dir=tmp_path / "tiny", opener=opener,
                manifest=manifest)
    assert len(out) == 4
    assert len(opener.calls) == 4
    for logical, path in out.items():
        assert path.read_bytes() == files[logical]
    sidecar = json.loads((tmp_path / "tiny" / "digests.json").read_text())
    assert set(sidecar) == set(files)

    # warm cache: no further transport activity
    fetch("tiny", out_dir=tmp_path / "tiny", opener=opener, manifest=manifest)
    assert len(opener.calls) == 4

    train, test = load_idx_dir(tmp_path / "tiny", "tiny")
    assert len(train) == 2 and len(test) == 2


def test_fetch_checksum_mismatch_quarantines(tmp_path):
    files = fake_dataset_files()
    manifest = fake_manifest(files)
    url = "http://example.invalid/train-images-idx3-ubyte.gz"
    opener = CountingOpener(files, corrupt_urls=[url])
    with pytest.raises(ChecksumError):
        fetch("tiny", out_dir=tmp_path / "t", opener=opener,
              manifest=manifest)
    assert not (tmp_path / "t" / "train-images-idx3-ubyte").exists()
    assert list((tmp_path / "t").glob("*.quarantine"))


def test_fetch_detects_cache_tampering(tmp_path):
    files = fake_dataset_files()
    manifest = fake_manifest(files)
    opener = CountingOpener(files)
    out = fetch("tiny", out_dir=tmp_path / "c", opener=opener,
                manifest=manifest)
    victim = out["train-labels-idx1-ubyte"]
    victim.write_bytes(b"evil")
    with pytest.raises(ChecksumError):
        fetch("tiny", out_dir=tmp_path / "c", opener=opener,
              manifest=manifest)
    assert victim.with_name(victim.name + ".quarantine").exists()


def test_fetch_trust_on_first_use_pins_digest(tmp_path):
    files = fake_dataset_files()
    manifest = fake_manifest(files, pin=False)  # sha256: null
    opener = CountingOpener(files)
    out = fetch("tiny", out_dir=tmp_path / "tofu", opener=opener,
                manifest=manifest)
    out["t10k-labels-idx1-ubyte"].write_bytes(b"swapped")
    with pytest.raises(ChecksumError):
        fetch("tiny", out_dir=tmp_path / "tofu", opener=opener,
              manifest=manifest)


def test_fetch_retries_once_then_fails(tmp_path):
    files = fake_dataset_files()
    manifest = fake_manifest(files)
    attempts = []

    def flaky(url):
        attempts.append(url)
        raise OSError("connection reset")

    with pytest.raises(MissingArtifactError):
        fetch("tiny", out_dir=tmp_path / "r", opener=flaky,
              manifest=manifest)
    assert len(attempts) == 2


def test_fetch_unknown_dataset():
    with pytest.raises(ConfigError):
        fetch("imagenet", manifest={"tiny": {}})


def blob_dataset(n=40, seed=0, shape=(1, 8, 8)):
    return make_synthetic(n, classes=4, shape=shape, noise=0.1,
                          stream=RngStream(seed))


def test_augment_multiplier_and_label_tiling():
    ds = blob_dataset(10)
    out = augment(ds, 3, stream=RngStream(1))
    assert len(out) == 30
    assert np.array_equal(out.images[:10], ds.images)
    assert np.array_equal(out.labels, np.tile(ds.labels, 3))
    assert not np.array_equal(out.images[10:20], ds.images)


def test_augment_zero_transform_is_identity():
    ds = blob_dataset(6)
    out = augment(ds, 2, max_shift_px=0, max_rotate_deg=0.0,
                  stream=RngStream(2))
    assert np.array_equal(out.images[6:], ds.images)


def test_augment_multiplier_one_is_noop():
    ds = blob_dataset(5)
    assert augment(ds, 1) is ds
    with pytest.raises(ConfigError):
        augment(ds, 0)


def test_translate_shifts_content():
    img = np.zeros((1, 1, 9, 9), dtype=np.float32)
    img[0, 0, 4, 4] = 1.0
    ds = Dataset(img, np.zeros(1, dtype=np.int64))
    out = corrupt(ds, "translate", 2, RngStream(3))
    assert out.images.sum() > 0.99  # mass preserved inside the canvas
    assert out.images[0, 0, 4, 4] != 1.0  # and moved somewhere else


def test_all_native_corruptions_run_and_stay_bounded():
    ds = blob_dataset(12)
    for kind in SEVERITY_TABLES:
        for severity in (1, 5):
            out = corrupt(ds, kind, severity, RngStream(4))
            assert out.images.shape == ds.images.shape
            assert out.images.min() >= 0.0 and out.images.max() <= 1.0
            assert np.array_equal(out.labels, ds.labels)
            assert f"{kind}:{severity}" in out.name


def test_corruption_zero_magnitude_identities():
    ds = blob_dataset(8)
    for kind, mag in [("gaussian_noise", 0.0), ("impulse_noise", 0.0),
                      ("brightness", 0.0), ("translate", 0.0),
                      ("rotate", 0.0), ("scale", 1.0), ("pixelate", 1.0)]:
        out = corrupt(ds, kind, 3, RngStream(5), magnitude=mag)
        assert np.array_equal(out.images, ds.images), kind
    # unit contrast gain only round-trips to float precision: (x-c)+c
    out = corrupt(ds, "contrast", 3, RngStream(5), magnitude=1.0)
    np.testing.assert_allclose(out.images, ds.images, atol=1e-7)


def test_gaussian_noise_statistics():
    flat = Dataset(np.full((50, 1, 20, 20), 0.5, dtype=np.float32),
                   np.zeros(50, dtype=np.int64))
    out = corrupt(flat, "gaussian_noise", 3, RngStream(6))
    sigma = SEVERITY_TABLES["gaussian_noise"][2]
    assert sigma == 0.10
    delta = out.images.astype(np.float64) - 0.5
    assert abs(delta.mean()) < 0.01
    assert abs(delta.std() - sigma) < 0.01


def test_shot_noise_severity_monotone():
    ds = blob_dataset(30, seed=7)
    spreads = []
    for severity in range(1, 6):
        out = corrupt(ds, "shot_noise", severity, RngStream(8))
        spreads.append(float(np.mean((out.images - ds.images) ** 2)))
    assert all(a < b for a, b in zip(spreads, spreads[1:]))


def test_stripe_inverts_middle_band():
    ds = blob_dataset(4)
    out = corrupt(ds, "stripe", 5, RngStream(9))
    h = ds.images.shape[2]
    band = max(1, int(round(h * SEVERITY_TABLES["stripe"][4])))
    lo = (h - band) // 2
    np.testing.assert_allclose(out.images[:, :, lo:lo + band],
                               1.0 - ds.images[:, :, lo:lo + band], atol=1e-6)
    assert np.array_equal(out.images[:, :, :lo], ds.images[:, :, :lo])


def test_precomputed_only_corruptions_rejected():
    ds = blob_dataset(3)
    with pytest.raises(UnsupportedCorruptionError):
        corrupt(ds, "fog", 1)
    with pytest.raises(UnsupportedCorruptionError):
        corrupt(ds, "nonexistent_kind", 1)
    with pytest.raises(ConfigError):
        corrupt(ds, "gaussian_noise", 6)


def test_batches_sizes_and_order():
    ds = blob_dataset(10)
    got = list(batches(ds, 3))
    assert [len(y) for _, y in got] == [3, 3, 3, 1]
    assert np.array_equal(np.concatenate([y for _, y in got]), ds.labels)


def test_batches_shuffle_is_permutation_and_needs_rng():
    ds = blob_dataset(20)
    rng = RngStream(10).generator()
    got = np.concatenate([y for _, y in batches(ds, 7, shuffle=True, rng=rng)])
    assert not np.array_equal(got, ds.labels)
    assert np.array_equal(np.sort(got), np.sort(ds.labels))
    with pytest.raises(ConfigError):
        list(batches(ds, 7, shuffle=True))


def test_make_synthetic_pair_shares_templates():
    train, test = make_synthetic_pair(60, 30, classes=3, shape=(1, 6, 6),
                                      noise=0.05, stream=RngStream(11))
    assert len(train) == 60 and len(test) == 30
    # same-label images across splits are near-identical up to noise
    for label in range(3):
        a = train.images[train.labels == label]
        b = test.images[test.labels == label]
        if len(a) and len(b):
            assert float(np.abs(a.mean(axis=0) - b.mean(axis=0)).mean()) < 0.1


def test_dataset_take():
    ds = blob_dataset(10)
    assert ds.take(0) is ds
    assert ds.take(99) is ds
    cut = ds.take(4)
    assert len(cut) == 4
    assert np.array_equal(cut.images, ds.images[:4])


def test_dataset_shape_validation():
    with pytest.raises(NevoError):
        Dataset(np.zeros((3, 1, 4, 4), dtype=np.float32),
                np.zeros(2, dtype=np.int64))
