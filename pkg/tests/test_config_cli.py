from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from wavelane import config as C
from wavelane.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, resolve, run
from wavelane.pipeline import write_rgb

SMALL_SCENE = ["--scene.width=256", "--scene.height=256"]
FAST = ["--data.patch=128", "--data.train_stride=128", "--data.test_stride=128", "--train.epochs=1", "--train.steps_per_epoch=3"]


# -- config ----------------------------------------------------------------------


def test_defaults_round_trip():
    cfg = C.RunConfig()
    assert C.round_trip(cfg) == cfg


@given(
    st.integers(0, 2**31 - 1),
    st.floats(1e-6, 1.0, allow_nan=False),
    st.lists(st.integers(1, 4), min_size=0, max_size=4, unique=True),
    st.booleans(),
)
def test_round_trip_of_modified_config(seed, lr, levels, augment):
    cfg = C.RunConfig()
    C.apply_overrides(
        cfg,
        [f"--run.seed={seed}", f"--train.lr={lr!r}", f"--injection.levels={','.join(map(str, levels))}", f"--train.augment={augment}"],
    )
    back = C.round_trip(cfg)
    assert back == cfg
    assert back.train.lr == lr and back.injection.levels == tuple(levels)


def test_parse_text_sections():
    cfg = C.parse_text("[train]\nlr = 0.01\nepochs = 3\n[injection]\ncomponents = H, V\n")
    assert cfg.train.lr == 0.01 and cfg.train.epochs == 3
    assert cfg.injection.components == ("H", "V")
    assert cfg.network_config().injection.components == ("H", "V")


@pytest.mark.parametrize(
    "text",
    ["[train]\nlearning_rate = 0.1\n", "[trian]\nlr = 0.1\n", "[train]\nepochs = many\n", "lr = 1\n", "[train]\naugment = maybe\n"],
)
def test_bad_config_text_rejected(text):
    with pytest.raises(C.ConfigError):
        C.parse_text(text)


def test_overrides_win_over_file(tmp_path):
    (tmp_path / "a.ini").write_text("[run]\nseed = 4\n[train]\nlr = 0.5\n")
    _, cfg = resolve(["--config", str(tmp_path / "a.ini"), "train", "--seed=9", "--train.lr=0.25"])
    assert cfg.run.seed == 9 and cfg.train.lr == 0.25 and cfg.run.command == "train"


def test_override_syntax_errors():
    with pytest.raises(C.ConfigError):
        C.apply_overrides(C.RunConfig(), ["--train.nope=1"])
    with pytest.raises(C.ConfigError):
        C.apply_overrides(C.RunConfig(), ["train.lr=1"])


# -- exit codes ----------------------------------------------------------------------


def test_exit_codes(tmp_path, capsys):
    assert run(["synth", f"--out={tmp_path}", "--bogus.key=1"]) == EXIT_CONFIG
    assert "unknown section" in capsys.readouterr().err
    assert run(["synth", f"--out={tmp_path}", "--train.lrr=1"]) == EXIT_CONFIG
    assert run(["synth", f"--out={tmp_path}", "stray"]) == EXIT_CONFIG
    assert run(["frobnicate"]) == EXIT_CONFIG
    assert run(["predict", f"--checkpoint={tmp_path / 'none.alnw'}", f"--image={tmp_path / 'x.png'}", f"--out={tmp_path}"]) == EXIT_DATA
    assert "not found" in capsys.readouterr().err
    (tmp_path / "bad.alnw").write_bytes(b"nope")
    write_rgb(tmp_path / "x.png", np.zeros((3, 8, 8), np.uint8))
    assert run(["predict", f"--checkpoint={tmp_path / 'bad.alnw'}", f"--image={tmp_path / 'x.png'}", f"--out={tmp_path}"]) == EXIT_DATA
    assert "[checkpoint]" in capsys.readouterr().err
    assert run(["synth", f"--out={tmp_path}", "--count=2"]) == EXIT_CONFIG


def test_gradcheck_failure_is_numeric_exit(tmp_path):
    args = ["gradcheck", f"--out={tmp_path}", "--gradcheck.size=32", "--gradcheck.per_block=1", "--gradcheck.tolerance=1e-300"]
    assert run(args + ["--injection.levels=1"]) == EXIT_NUMERIC
    assert (tmp_path / "gradcheck.txt").exists()


# -- end to end ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    assert run(["synth", f"--out={root / 'syn'}", "--count=3", "--data.val_fraction=0.0"] + SMALL_SCENE) == EXIT_OK
    manifest = root / "syn" / "data" / "manifest.tsv"
    assert run(["train", f"--manifest={manifest}", f"--out={root / 'tr'}", "--seed=1"] + FAST) == EXIT_OK
    return root, manifest


def test_train_outputs(trained):
    root, _ = trained
    assert (root / "tr" / "checkpoint.alnw").exists()
    log = (root / "tr" / "train_log.tsv").read_text().splitlines()
    assert len(log) == 2
    assert (root / "tr" / "run-manifest.ini").exists()


def test_predict_then_eval_reports_metrics_in_unit_range(trained):
    root, _ = trained
    data = root / "syn" / "data"
    test_img = sorted((data / "images").glob("*.png"))[-1]
    truth = data / "masks" / test_img.name
    args = ["predict", f"--checkpoint={root / 'tr' / 'checkpoint.alnw'}", f"--image={test_img}", f"--mask={truth}"] + FAST
    assert run(args + [f"--out={root / 'p1'}"]) == EXIT_OK
    assert run(args + [f"--out={root / 'p2'}", "--run.workers=2"]) == EXIT_OK
    m1 = (root / "p1" / f"{test_img.stem}_mask.png").read_bytes()
    assert m1 == (root / "p2" / f"{test_img.stem}_mask.png").read_bytes()
    assert (root / "p1" / f"{test_img.stem}_overlay.png").exists()

    assert run(["eval", f"--pred={root / 'p1' / (test_img.stem + '_mask.png')}", f"--truth={truth}", f"--out={root / 'ev'}"]) == EXIT_OK
    values = {}
    for line in (root / "ev" / "report.txt").read_text().splitlines():
        k, v = line.split(" = ")
        if k != "flags":
            values[k] = float(v)
    for k in ("pixel_accuracy", "mean_accuracy", "mean_iou", "fw_iou", "dice", "precision_lane", "recall_lane"):
        assert 0.0 <= values[k] <= 1.0


def test_eval_directory_pairs(trained, tmp_path):
    root, _ = trained
    masks = root / "syn" / "data" / "masks"
    assert run(["eval", f"--pred={masks}", f"--truth={masks}", f"--out={tmp_path}"]) == EXIT_OK
    text = (tmp_path / "report.txt").read_text()
    assert "mean_iou = 1.0" in text
    assert len((tmp_path / "per_image.tsv").read_text().splitlines()) == 4


def test_replay_reproduces_bit_exactly(trained):
    root, _ = trained
    first = (root / "tr" / "checkpoint.alnw").read_bytes()
    manifest = root / "tr" / "run-manifest.ini"
    replay_dir = root / "tr_replay"
    assert run(["replay", str(manifest), f"--run.out_dir={replay_dir}"]) == EXIT_OK
    assert (replay_dir / "checkpoint.alnw").read_bytes() == first


def test_dwt_writes_sixteen_subbands(tmp_path):
    rng = np.random.default_rng(0)
    write_rgb(tmp_path / "img.png", rng.integers(0, 256, (3, 256, 256), dtype=np.uint8))
    assert run(["dwt", f"--image={tmp_path / 'img.png'}", "--levels=4", f"--out={tmp_path / 'd'}"]) == EXIT_OK
    pngs = sorted(p.name for p in (tmp_path / "d").glob("L*_*.png"))
    assert len(pngs) == 16
    for level, side in zip(range(1, 5), (128, 64, 32, 16)):
        for c in "AHVD":
            assert read_mask_shape(tmp_path / "d" / f"L{level}_{c}.png") == (side, side)
    assert (tmp_path / "d" / "coefficients.alnw").exists()


def read_mask_shape(path: Path):
    from PIL import Image

    with Image.open(path) as im:
        return im.size[::-1]
