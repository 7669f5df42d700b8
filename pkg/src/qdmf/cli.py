"""``qdmf`` command line: teacher training, calibration, fine-tuning and analysis.

Every command writes into ``--out`` and is deterministic for a fixed seed,
apart from the wall-clock column of ``bench.csv``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import warnings
import zipfile
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig, load_config
from .diffusion import SamplerConfig, gaussian_mixture, make_schedule, sample, train_teacher
from .distill import (DistillConfig, build_student, calibrate, collect_activations,
                      eval_trajectory_mse, finetune, generate_states)
from .errors import CheckpointError, ConfigurationError, TrainingDiverged
from .intkernel import bench, model_bytes
from .metrics import energy_distance
from .qalora import LayerPrecisionPolicy

log = logging.getLogger("qdmf")

COMMANDS = ("make-data", "teacher-train", "calibrate", "finetune", "sample", "eval", "bench", "stats")


def write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def write_npz(path: Path, arrays: dict) -> Path:
    """Like ``np.savez`` but with fixed member timestamps, so reruns are byte-identical."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asarray(arr), allow_pickle=False)
    return path


def read_points(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"dataset {str(path)!r} not found")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.size == 0:
        raise ConfigurationError(f"dataset {path} is empty")
    return data


def _model_path(arg, out: Path, default: str) -> Path:
    return Path(arg) if arg else out / default


def cmd_make_data(cfg: RunConfig, args, out: Path) -> list[Path]:
    pts = gaussian_mixture(cfg.data_points, seed=cfg.seed, modes=cfg.data_modes,
                           radius=cfg.data_radius, std=cfg.data_std)
    return [write_csv(out / "data.csv", ["x", "y"], pts.tolist())]


def cmd_teacher_train(cfg: RunConfig, args, out: Path) -> list[Path]:
    if not cfg.dataset:
        raise ConfigurationError("teacher-train needs a dataset (config key 'dataset' or --dataset)")
    data = read_points(cfg.dataset)
    schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    losses: list = []
    teacher = train_teacher(data, schedule, epochs=cfg.epochs, lr=cfg.teacher_lr,
                            batch=cfg.teacher_batch, seed=cfg.seed, hidden=cfg.hidden,
                            depth=cfg.depth, emb_dim=cfg.emb_dim, loss_log=losses)
    return [checkpoint.save(out / "teacher.qdmf", teacher, schedule),
            write_csv(out / "teacher_loss.csv", ["epoch", "loss"], enumerate(losses))]


def _layer_rows(model):
    rows = []
    for i, spec in enumerate(checkpoint.quantizer_state(model)):
        layer = model.layers[i]
        c_in, c_out = layer.shape
        table = np.asarray(spec["act_scales"])
        rows.append([layer.layer_id, c_in, c_out, spec["bits_w"], spec["bits_a"], int(spec["pinned"]),
                     int(spec["shared"]), float(np.mean(spec["s_w"])), float(table.min()), float(table.max())])
    return rows


LAYER_HEADER = ["layer", "c_in", "c_out", "bits_w", "bits_a", "pinned", "shared_act_scale",
                "s_w_mean", "s_x_min", "s_x_max"]


def cmd_calibrate(cfg: RunConfig, args, out: Path) -> list[Path]:
    teacher, schedule = checkpoint.load(_model_path(args.fp_model, out, "teacher.qdmf"))
    policy = LayerPrecisionPolicy(cfg.bits_w, cfg.bits_a, len(teacher.layers))
    student = calibrate(teacher, schedule, policy, rank=cfg.rank, batch=cfg.calib_batch,
                        seed=cfg.seed, temporal=cfg.talsq)
    return [checkpoint.save(out / "calibrated.qdmf", student, schedule),
            write_csv(out / "layers.csv", LAYER_HEADER, _layer_rows(student))]


def _match_tables(state, teacher, schedule, cfg: RunConfig):
    """Bring saved activation tables in line with the requested temporal mode."""
    shared = [s["shared"] for s in state]
    if cfg.talsq and any(shared):
        for s in state:
            if s["shared"]:
                s["act_scales"] = np.full(schedule.T, s["act_scales"][0])
                s["shared"] = False
    elif not cfg.talsq and not all(shared):
        # a single scale per layer needs its own pooled calibration
        policy = LayerPrecisionPolicy(state[1]["bits_w"], state[1]["bits_a"], len(state))
        pooled = calibrate(teacher, schedule, policy, rank=0, batch=cfg.calib_batch,
                           seed=cfg.seed, temporal=False)
        for s, layer in zip(state, pooled.layers):
            s["act_scales"] = layer.act_scales.values
            s["shared"] = True
    return state


def cmd_finetune(cfg: RunConfig, args, out: Path) -> list[Path]:
    teacher, schedule = checkpoint.load(_model_path(args.fp_model, out, "teacher.qdmf"))
    quantized, _ = checkpoint.load(_model_path(args.q_model, out, "calibrated.qdmf"))
    state = _match_tables(checkpoint.quantizer_state(quantized), teacher, schedule, cfg)
    student = build_student(teacher, state, rank=cfg.rank, seed=cfg.seed)
    dcfg = DistillConfig(iterations=cfg.iterations, batch=cfg.batch, lr=cfg.lr, T=schedule.T,
                         seed=cfg.seed, scale_aware=cfg.scale_aware,
                         lr_weight_scale=cfg.lr_weight_scale, lr_act_scale=cfg.lr_act_scale)
    progress: list = []
    try:
        finetune(teacher, student, dcfg, schedule, progress=progress)
    except TrainingDiverged:
        checkpoint.save(out / "finetuned_last_good.qdmf", student, schedule)
        write_csv(out / "finetune_log.csv", ["iteration", "t", "loss"], progress)
        raise
    return [checkpoint.save(out / "finetuned.qdmf", student, schedule),
            write_csv(out / "finetune_log.csv", ["iteration", "t", "loss"], progress)]


def cmd_sample(cfg: RunConfig, args, out: Path) -> list[Path]:
    model, schedule = checkpoint.load(_model_path(args.model, out, "finetuned.qdmf"))
    pts = sample(model, schedule, SamplerConfig(cfg.steps), cfg.n_samples, cfg.seed)
    return [write_csv(out / "samples.csv", ["x", "y"], pts.tolist())]


def evaluate(teacher, student, schedule, cfg: RunConfig) -> dict:
    """Trajectory MSE plus energy distances, the teacher's self-distance being the noise floor.

    Student and second teacher draw share a seed, so both distances are
    measured against the same reference under the same noise.
    """
    sampler = SamplerConfig(cfg.steps)
    reference = sample(teacher, schedule, sampler, cfg.n_samples, cfg.seed)
    other = sample(teacher, schedule, sampler, cfg.n_samples, cfg.seed + 1)
    student_pts = sample(student, schedule, sampler, cfg.n_samples, cfg.seed + 1)
    return {
        "steps": cfg.steps,
        "trajectory_mse": eval_trajectory_mse(teacher, student, schedule, cfg.n_trajectories,
                                              seed=cfg.seed, steps=cfg.steps),
        "energy_distance": energy_distance(student_pts, reference),
        "teacher_self_distance": energy_distance(other, reference),
    }


def cmd_eval(cfg: RunConfig, args, out: Path) -> list[Path]:
    teacher, schedule = checkpoint.load(_model_path(args.fp_model, out, "teacher.qdmf"))
    student, _ = checkpoint.load(_model_path(args.q_model or args.model, out, "finetuned.qdmf"))
    result = evaluate(teacher, student, schedule, cfg)
    return [write_csv(out / "eval.csv", ["metric", "value"], result.items())]


def cmd_bench(cfg: RunConfig, args, out: Path) -> list[Path]:
    rows = bench(cfg.shapes(), cfg.bits_list(), cfg.bench_repetitions, seed=cfg.seed)
    header = ["shape", "bits", "ns_per_op", "bytes", "fp32_bytes", "ratio"]
    paths = [write_csv(out / "bench.csv", header, ([r[k] for k in header] for r in rows))]
    if args.q_model:
        model, _ = checkpoint.load(args.q_model)
        sizes = model_bytes(model.layers)
        paths.append(write_csv(out / "model_size.csv", ["metric", "value"], sizes.items()))
    return paths


def cmd_stats(cfg: RunConfig, args, out: Path) -> list[Path]:
    """Per-layer, per-step input ranges along the model's own sampling trajectories."""
    model, schedule = checkpoint.load(_model_path(args.model, out, "teacher.qdmf"))
    sampler = SamplerConfig(cfg.steps)
    traj = generate_states(model, schedule, sampler, cfg.calib_batch, cfg.seed)
    view = model.for_steps(cfg.steps) if cfg.steps != schedule.T else model
    acts = collect_activations(view, traj)
    rows, dump = [], {}
    for i, layer in enumerate(model.layers):
        for k in np.argsort([step for _, _, step in traj]):
            _, t, step = traj.states[k]
            a = acts[i][k]
            rows.append([layer.layer_id, step, t, float(a.min()), float(a.max()), float(a.var())])
            dump[f"{layer.layer_id}_step{step}"] = a
    paths = [write_csv(out / "stats.csv", ["layer", "step", "t", "min", "max", "variance"], rows)]
    if args.dump_activations:
        paths.append(write_npz(out / "activations.npz", dump))
    return paths


HANDLERS = {
    "make-data": cmd_make_data,
    "teacher-train": cmd_teacher_train,
    "calibrate": cmd_calibrate,
    "finetune": cmd_finetune,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "stats": cmd_stats,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qdmf", description="Low-bit diffusion model fine-tuning toolkit.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--bits-w", type=int, dest="bits_w")
    p.add_argument("--bits-a", type=int, dest="bits_a")
    p.add_argument("--rank", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.add_argument("--no-scale-aware", action="store_true")
    p.add_argument("--no-talsq", action="store_true")
    p.add_argument("--fp-model", help="full-precision checkpoint (default OUT/teacher.qdmf)")
    p.add_argument("--q-model", help="quantized checkpoint")
    p.add_argument("--model", help="checkpoint to sample from or analyse")
    p.add_argument("--dump-activations", action="store_true", help="stats: also write activations.npz")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: getattr(args, k) for k in ("seed", "bits_w", "bits_a", "rank", "steps",
                                               "iterations", "epochs", "dataset", "out")}
    if args.no_scale_aware:
        overrides["scale_aware"] = False
    if args.no_talsq:
        overrides["talsq"] = False
    try:
        cfg = load_config(args.config, **overrides)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        paths = HANDLERS[args.command](cfg, args, out)
    except (ConfigurationError, CheckpointError, FileNotFoundError, TrainingDiverged) as exc:
        log.error("%s", exc)
        return 2
    for path in paths:
        log.info("wrote %s", path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
