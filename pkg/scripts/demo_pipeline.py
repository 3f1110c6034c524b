"""Small end-to-end run: synthesize scenes, train briefly, predict one scene, score it.

Usage: python scripts/demo_pipeline.py [OUT_DIR]

Scenes are 512x512 so the whole demo finishes in a few minutes on one core.
"""
import sys
from pathlib import Path

from wavelane.cli import run


def main(out: Path) -> int:
    scene = ["--scene.width=512", "--scene.height=512"]
    data = ["--data.patch=256", "--data.train_stride=256", "--data.test_stride=256"]
    steps = [
        ["synth", f"--out={out / 'synth'}", "--count=4", "--data.val_fraction=0.0", "--data.test_fraction=0.25"] + scene,
        ["train", f"--manifest={out / 'synth' / 'data' / 'manifest.tsv'}", f"--out={out / 'train'}", "--train.epochs=2",
         "--train.lr=1e-3", "--train.lambda_lane=0"] + data,
    ]
    for argv in steps:
        print("$ wavelane", " ".join(argv))
        if code := run(argv):
            return code
    image = out / "synth" / "data" / "images" / "scene_0003.png"
    truth = out / "synth" / "data" / "masks" / "scene_0003.png"
    for argv in (
        ["predict", f"--checkpoint={out / 'train' / 'checkpoint.alnw'}", f"--image={image}", f"--mask={truth}", f"--out={out / 'predict'}"] + data,
        ["eval", f"--pred={out / 'predict' / 'scene_0003_mask.png'}", f"--truth={truth}", f"--out={out / 'eval'}"],
    ):
        print("$ wavelane", " ".join(argv))
        if code := run(argv):
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main(Path(sys.argv[1] if len(sys.argv) > 1 else "runs/demo")))
