#!/usr/bin/env python3
"""Build the benchmark artifacts the slow acceptance tests consume.

Runs the full desk-scale protocol: dataset generation, three architecture
variants (plus the two-stage refinement model) trained with three seeds
each, and the evaluation sweep against the RANSAC baseline. Everything
goes through the CLI, so manifests and logs are produced as in normal
use. Results land in acceptance_cache/ next to the repository root; the
acceptance tests refuse to regenerate them implicitly unless
TWOVIEW_ALLOW_TRAIN=1 is set (a full build is several CPU-hours).

Usage: python3 scripts/run_acceptance_protocol.py [--jobs 2] [--steps N]
"""

import argparse
import json
import os
import subprocess
import sys
import time

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CACHE = os.environ.get("TWOVIEW_CACHE", os.path.join(ROOT, "acceptance_cache"))
SEEDS = (0, 1, 2)

TRAIN_PAIRS = 2000
HELDOUT_PAIRS = 200
TRAIN_SEED = 10_000
HELDOUT_SEED = 900_000
STEPS = 10_000

SCENE_LINES = [
    "scene.n = 512",
    "scene.outlier_ratio = 0.6",
    "scene.pixel_noise = 1.0",
]
LOSS_LINES = [
    "loss.kind = geometry",
    "loss.warmup = 500",
]
TRAIN_LINES = [
    "train.batch_size = 8",
    "train.lr = 1e-4",
    "train.log_every = 200",
    "train.val_pairs = 20",
]

VARIANTS = {
    "pointcn": ["net.use_pool = false"],
    "pool": ["net.level2_kind = pointcn"],
    "full": [],
    "iter": ["net.iterative = true",
             "net.blocks_before_pool = 1",
             "net.blocks_after_unpool = 1",
             "net.level2_blocks = 1"],
}


def config_path(variant):
    return os.path.join(CACHE, f"{variant}.cfg")


def write_configs(steps):
    os.makedirs(CACHE, exist_ok=True)
    for variant, extra in VARIANTS.items():
        lines = SCENE_LINES + LOSS_LINES + TRAIN_LINES + [f"train.steps = {steps}"] + extra
        with open(config_path(variant), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def cli_env():
    env = dict(os.environ)
    env.setdefault("OPENBLAS_NUM_THREADS", "1")
    env.setdefault("OMP_NUM_THREADS", "1")
    env.setdefault("MALLOC_MMAP_MAX_", "0")
    return env


def run_cli(args, log_path=None):
    cmd = [sys.executable, "-m", "twoview.cli"] + args
    out = open(log_path, "w") if log_path else None
    try:
        subprocess.run(cmd, check=True, env=cli_env(), stdout=out or None,
                       stderr=subprocess.STDOUT if out else None, cwd=ROOT)
    finally:
        if out:
            out.close()


def spawn_cli(args, log_path):
    out = open(log_path, "w")
    return subprocess.Popen([sys.executable, "-m", "twoview.cli"] + args, env=cli_env(),
                            stdout=out, stderr=subprocess.STDOUT, cwd=ROOT), out


def dataset_paths():
    return os.path.join(CACHE, "train.txt"), os.path.join(CACHE, "heldout.txt")


def model_path(variant, seed):
    return os.path.join(CACHE, f"model_{variant}_s{seed}.bin")


def metrics_path(name):
    return os.path.join(CACHE, f"metrics_{name}.csv")


def generate_datasets():
    train, heldout = dataset_paths()
    if not os.path.exists(train):
        run_cli(["gen", "--seed", str(TRAIN_SEED), "--config", config_path("full"),
                 "--out", train, "--pairs", str(TRAIN_PAIRS)])
    if not os.path.exists(heldout):
        run_cli(["gen", "--seed", str(HELDOUT_SEED), "--config", config_path("full"),
                 "--out", heldout, "--pairs", str(HELDOUT_PAIRS)])


def train_all(jobs):
    train, _ = dataset_paths()
    queue = []
    for variant in VARIANTS:
        for seed in SEEDS:
            out = model_path(variant, seed)
            if os.path.exists(out):
                continue
            queue.append((variant, seed, out))
    running = []
    while queue or running:
        while queue and len(running) < jobs:
            variant, seed, out = queue.pop(0)
            print(f"[protocol] training {variant} seed {seed}", flush=True)
            proc, fh = spawn_cli(
                ["train", "--seed", str(seed), "--config", config_path(variant),
                 "--dataset", train, "--out", out],
                out + ".console.log")
            running.append((proc, fh, variant, seed, out))
        time.sleep(5)
        still = []
        for proc, fh, variant, seed, out in running:
            if proc.poll() is None:
                still.append((proc, fh, variant, seed, out))
                continue
            fh.close()
            if proc.returncode != 0:
                raise RuntimeError(f"training {variant} seed {seed} failed "
                                   f"(exit {proc.returncode}, see {out}.console.log)")
            print(f"[protocol] finished {variant} seed {seed}", flush=True)
        running = still


def evaluate_all():
    _, heldout = dataset_paths()
    if not os.path.exists(metrics_path("ransac")):
        run_cli(["eval", "--seed", "77", "--config", config_path("full"),
                 "--dataset", heldout, "--method", "ransac",
                 "--out", metrics_path("ransac")])
    for variant in VARIANTS:
        for seed in SEEDS:
            name = f"{variant}_s{seed}"
            if os.path.exists(metrics_path(name)):
                continue
            print(f"[protocol] evaluating {name}", flush=True)
            run_cli(["compare", "--seed", "77", "--config", config_path(variant),
                     "--dataset", heldout, "--methods", "net,net+ransac",
                     "--checkpoint", model_path(variant, seed),
                     "--out", metrics_path(name)])


def read_metrics(name):
    rows = {}
    with open(metrics_path(name), "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            parts = line.strip().split(",")
            rows[parts[0]] = {k: (parts[i] if k == "method" else float(parts[i]))
                              for i, k in enumerate(header)}
    return rows


def collect_summary():
    summary = {"steps": STEPS, "seeds": list(SEEDS),
               "ransac_map5": read_metrics("ransac")["ransac"]["mAP5"]}
    for variant in VARIANTS:
        per_seed = {}
        for seed in SEEDS:
            rows = read_metrics(f"{variant}_s{seed}")
            per_seed[str(seed)] = {
                "net_map5": rows["net"]["mAP5"],
                "net_ransac_map5": rows["net+ransac"]["mAP5"],
                "net_precision": rows["net"]["precision"],
                "net_recall": rows["net"]["recall"],
                "net_failures": rows["net"]["failures"],
            }
        summary[variant] = per_seed
    path = os.path.join(CACHE, "summary.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(f"[protocol] wrote {path}", flush=True)
    return summary


def main():
    global STEPS
    parser = argparse.ArgumentParser()
    parser.add_argument("--jobs", type=int, default=2)
    parser.add_argument("--steps", type=int, default=STEPS)
    args = parser.parse_args()
    STEPS = args.steps
    started = time.time()
    write_configs(args.steps)
    generate_datasets()
    train_all(args.jobs)
    evaluate_all()
    summary = collect_summary()
    print(json.dumps(summary, indent=2, sort_keys=True))
    print(f"[protocol] done in {(time.time() - started) / 60:.1f} min")


if __name__ == "__main__":
    main()
