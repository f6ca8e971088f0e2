"""Run every CLI command on a micro configuration (about ten seconds).

Pass an output directory as the first argument, default ./micro_run.
The desk-scale run uses the same commands without the overrides below.
"""
import sys
from pathlib import Path

from nsarm.cli import main

root = Path(sys.argv[1] if len(sys.argv) > 1 else "micro_run").resolve()
root.mkdir(parents=True, exist_ok=True)
ini = root / "micro.ini"
ini.write_text(
    f"""
[paths]
data_dir = {root}/data
checkpoint_dir = {root}/ckpt
output_dir = {root}/out

[schedule]
preset = 32

[data]
n_images = 24
n_train = 16

[tokenizer]
width = 16
epochs = 3
batch_size = 8

[ar]
model_dim = 32
depth = 1
heads = 2

[tnet]
width = 16

[pretrain_ar]
iterations = 20
batch_size = 8

[stage1]
iterations = 40
batch_size = 8

[stage2]
iterations = 20
batch_size = 8
"""
)

steps = [
    ["make-data"],
    ["train-tokenizer"],
    ["pretrain-ar"],
    ["train-stage1"],
    ["train-stage2"],
    ["infer"],
    ["pathway", "--ref", f"{root}/data/gt/0020.ppm", "--k", "0..K"],
    ["eval-images"],
    ["eval-scores", "--scores", f"{root}/out/image_scores.csv", "--svg"],
    ["report-robustness", "--scores", f"{root}/out/image_scores.csv", "--metrics", "psnr"],
]
for argv in steps:
    print("nsarm", " ".join(argv))
    if main(argv + ["--config", str(ini), "--seed", "0"]) != 0:
        sys.exit(1)

print((root / "out" / "pathway" / "0020_distances.csv").read_text())
print((root / "out" / "failure_report.csv").read_text())
