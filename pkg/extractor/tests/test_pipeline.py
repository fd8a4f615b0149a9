import warnings

import numpy as np
import pytest
from PIL import Image

from extractor.formats import read_pyramid_minimal
from extractor.pipeline import ExtractConfig, extract

SIZE = 16  # smallest resolution divisible by the deepest tap stride


def small_config(**kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return ExtractConfig(input_size=SIZE, **kw)


def write_png(path, value=128, size=24):
    path.parent.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(abs(hash(path.name)) % 2**32)
    pixels = np.full((size, size, 3), value, dtype=np.uint8)
    pixels ^= rng.integers(0, 64, pixels.shape, dtype=np.uint8)
    Image.fromarray(pixels).save(path)


@pytest.fixture()
def dataset(tmp_path):
    root = tmp_path / "data"
    for i in range(2):
        write_png(root / "train" / "good" / f"{i:03d}.png")
    write_png(root / "test" / "good" / "000.png")
    write_png(root / "test" / "crack" / "000.png")
    mask = np.zeros((24, 24), dtype=np.uint8)
    mask[4:12, 4:12] = 255
    gt = root / "ground_truth" / "crack"
    gt.mkdir(parents=True)
    Image.fromarray(mask).save(gt / "000_mask.png")
    return root


def test_config_validation():
    with pytest.raises(ValueError, match="layers"):
        ExtractConfig(layers=(0, 4))
    with pytest.raises(ValueError, match="divisible"):
        ExtractConfig(input_size=100)  # deepest stride is 16
    # only taps up to stride 8 -> 24 is fine
    ExtractConfig(input_size=24, layers=(1, 2))


def test_extract_layout_and_manifest(dataset, tmp_path):
    out = tmp_path / "out"
    result = extract(dataset, out, small_config())
    assert result.num_images == 4
    assert result.masks_available
    lines = (out / "manifest.tsv").read_text().splitlines()
    assert lines[0] == f"#cflow-manifest v1 {SIZE} {SIZE} true"
    assert len(lines) == 5
    record = dict(zip(("id", "split", "label", "mask"),
                      lines[-1].split("\t")))
    assert record == {"id": "test_good_000", "split": "test",
                      "label": "good", "mask": "-"}
    crack = [l for l in lines if l.startswith("test_crack_")][0].split("\t")
    assert crack[2] == "anomalous"
    assert (out / crack[3]).exists()
    assert len(list((out / "features").glob("*.cfpd"))) == 4


def test_scales_ordered_deepest_first(dataset, tmp_path):
    extract(dataset, tmp_path / "out", small_config())
    _, scales = read_pyramid_minimal(
        tmp_path / "out" / "features" / "train_good_000.cfpd")
    grids = [m.shape[:2] for m in scales]
    assert grids == [(SIZE // 16, SIZE // 16), (SIZE // 8, SIZE // 8),
                     (SIZE // 4, SIZE // 4)]
    depths = [m.shape[2] for m in scales]
    assert depths == sorted(depths, reverse=True)


def test_two_runs_bit_identical(dataset, tmp_path):
    extract(dataset, tmp_path / "a", small_config())
    extract(dataset, tmp_path / "b", small_config())
    for path_a in sorted((tmp_path / "a").rglob("*")):
        if path_a.is_dir():
            continue
        path_b = tmp_path / "b" / path_a.relative_to(tmp_path / "a")
        assert path_a.read_bytes() == path_b.read_bytes(), path_a.name


def test_all_black_image_gives_finite_features(tmp_path):
    root = tmp_path / "data"
    (root / "train" / "good").mkdir(parents=True)
    Image.fromarray(np.zeros((24, 24, 3), dtype=np.uint8)).save(
        root / "train" / "good" / "black.png")
    extract(root, tmp_path / "out", small_config())
    _, scales = read_pyramid_minimal(
        tmp_path / "out" / "features" / "train_good_black.cfpd")
    assert all(np.isfinite(m).all() for m in scales)


def test_rotation_augment_adds_train_views(dataset, tmp_path):
    out = tmp_path / "out"
    result = extract(dataset, out, small_config(rotation_augment=True))
    assert result.num_images == 8  # 2 train * 3 views + 2 test
    ids = [l.split("\t")[0]
           for l in (out / "manifest.tsv").read_text().splitlines()[1:]]
    assert "train_good_000_rotm5" in ids and "train_good_000_rotp5" in ids
    assert not any("rot" in i for i in ids if i.startswith("test_"))
    base = read_pyramid_minimal(out / "features" / "train_good_000.cfpd")[1]
    rot = read_pyramid_minimal(
        out / "features" / "train_good_000_rotm5.cfpd")[1]
    assert not all(np.array_equal(a, b) for a, b in zip(base, rot))


def test_missing_mask_disables_masks(dataset, tmp_path):
    write_png(dataset / "test" / "crack" / "001.png")  # no mask for it
    out = tmp_path / "out"
    result = extract(dataset, out, small_config())
    assert not result.masks_available
    lines = (out / "manifest.tsv").read_text().splitlines()
    assert lines[0].endswith(" false")
    assert all(l.split("\t")[3] == "-" for l in lines[1:])
    assert not list((out / "masks").iterdir())


def test_missing_train_dir_raises(tmp_path):
    with pytest.raises(FileNotFoundError, match="train/good"):
        extract(tmp_path, tmp_path / "out", small_config())


def test_mask_resized_binary(dataset, tmp_path):
    out = tmp_path / "out"
    extract(dataset, out, small_config())
    pgm = next((out / "masks").glob("*.pgm")).read_bytes()
    assert pgm.startswith(f"P5\n{SIZE} {SIZE}\n255\n".encode())
    body = np.frombuffer(pgm.split(b"\n", 3)[3], dtype=np.uint8)
    assert set(np.unique(body)) <= {0, 255}
    assert (body == 255).any()
