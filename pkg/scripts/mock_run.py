"""Run the full pipeline offline: mock editing backend plus the statistic judge.

Writes iter_<k>.png, best.png and runlog.json under --out-dir and prints how
far the incumbent landed from the judge's target.
"""

import argparse
import tempfile
from pathlib import Path

from cfgtune.backend import solid_png
from cfgtune.pipeline import load_config, run_pipeline, summary_lines
from cfgtune.providers import StatisticJudge
from cfgtune.types import GuidanceScales


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--image", help="input PNG/JPEG; a flat 64x64 image is used if omitted")
    ap.add_argument("--instruction", default="Make the cup red")
    ap.add_argument("--out-dir", default="runs/mock")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--max-iters", type=int, default=20)
    ap.add_argument("--target", default="1.6,6.0", help="s_image,s_text the judge prefers")
    ap.add_argument("--refine-rounds", type=int, default=0)
    args = ap.parse_args()

    image = args.image
    if image is None:
        image = str(Path(tempfile.mkdtemp()) / "input.png")
        Path(image).write_bytes(solid_png(64, 64, (120, 130, 140)))
    target = GuidanceScales(*(float(v) for v in args.target.split(",")))
    settings = load_config(None, {
        "image": image, "instruction": args.instruction, "mock": True, "out_dir": args.out_dir,
        "seed": args.seed, "max_iters": args.max_iters, "score_threshold": 1.0,
        "patience": args.max_iters, "refine_rounds": args.refine_rounds,
    })
    result = run_pipeline(settings, provider=StatisticJudge(target), progress=print)
    print("\n".join(summary_lines(result.record)))
    best = result.record.incumbent.scales
    print(f"distance to target: d_image={abs(best.s_image - target.s_image):.4f} "
          f"d_text={abs(best.s_text - target.s_text):.4f}")


if __name__ == "__main__":
    main()
