"""Command-line entry point.

Subcommands: synth-data, train, eval-rotation, analyze-tokens, gradcheck,
params, kernel-dump.  One JSON config file drives everything; sections a
subcommand does not need are ignored.  Exit codes: 0 ok, 1 check failure,
2 config error, 3 IO/data error, 4 numeric divergence, 5 checkpoint error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import data as data_mod
from . import evalsuite, gmr, tensorkit as tk, trainer, vit
from .errors import (
    CheckpointCorruptionError,
    CheckpointFormatError,
    ConfigError,
    DataError,
    EquipatchError,
    TrainingDivergedError,
)
from .tensorkit import Tensor

EXIT_OK = 0
EXIT_CHECK_FAILURE = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_CHECKPOINT = 5


def _load_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load_run_config(args.config) if args.config else config_mod.default_config()
    if getattr(args, "seed", None) is not None:
        cfg.model["seed"] = args.seed
        cfg.train["seed"] = args.seed
    return cfg


def _split_dataset(cfg: config_mod.RunConfig, root) -> tuple[data_mod.DatasetIndex, data_mod.DatasetIndex]:
    index = data_mod.load_folder(root)
    return data_mod.stratified_split(index, cfg.data["split_frac"], cfg.data["split_seed"])


def _load_checkpoint_or_exit(path):
    try:
        return trainer.load_checkpoint(path)
    except FileNotFoundError as exc:
        raise CheckpointFormatError(f"checkpoint not found: {path}") from exc


def _resolve_fill(cfg, meta, images) -> np.ndarray:
    policy = cfg.eval["fill"]
    if isinstance(policy, list):
        return np.asarray(policy, dtype=np.float32)
    if policy == "train_mean" and "train_channel_mean" in meta.get("tensors", {}):
        return meta["tensors"]["train_channel_mean"]
    return data_mod.channel_mean(images)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    cfg = _load_config(args)
    out = args.out or cfg.paths["out_dir"]
    spec = cfg.synth_spec()
    index = data_mod.generate_dataset(spec, cfg.data["n_per_class"], out)
    manifest = json.loads((Path(out) / "manifest.json").read_text())
    print(f"wrote {len(index)} images across {len(index.class_names)} classes to {out}")
    print(f"manifest sha256: {manifest['sha256']}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    root = args.data or cfg.data["root"]
    if not root:
        raise ConfigError("train needs --data or a data.root config entry")
    out = Path(args.out or cfg.paths["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.ckpt"

    train_idx, _ = _split_dataset(cfg, root)
    model = vit.build_model(cfg.vit_config(), cfg.model["seed"])
    train_cfg = cfg.train_config()
    try:
        history = trainer.train(model, train_idx, train_cfg)
    except TrainingDivergedError:
        if ckpt_path.exists():
            ckpt_path.unlink()
        raise
    train_mean = data_mod.channel_mean(train_idx.images())
    trainer.save_checkpoint(
        model, ckpt_path,
        meta={"model_seed": cfg.model["seed"], "train_seed": train_cfg.seed},
        extra_tensors={"train_channel_mean": train_mean},
    )
    trainer.write_history_csv(history, out / "history.csv")
    for epoch, loss, acc in history:
        print(f"epoch {epoch}: mean_loss={loss:.6f} train_acc={acc:.4f}")
    print(f"checkpoint: {ckpt_path}")
    return EXIT_OK


def cmd_eval_rotation(args) -> int:
    cfg = _load_config(args)
    ckpt = args.checkpoint or cfg.paths["checkpoint"]
    if not ckpt:
        raise ConfigError("eval-rotation needs --checkpoint or a paths.checkpoint config entry")
    root = args.data or cfg.data["root"]
    if not root:
        raise ConfigError("eval-rotation needs --data or a data.root config entry")
    out = Path(args.out or cfg.paths["out_dir"])

    model, meta = _load_checkpoint_or_exit(ckpt)
    _, test_idx = _split_dataset(cfg, root)
    angles = [int(a) for a in args.angles.split(",")] if args.angles else cfg.eval["angles"]
    fill = _resolve_fill(cfg, meta, test_idx.images())
    report = evalsuite.rotation_sweep(model, test_idx, angles=angles, fill=fill)
    model_id = hashlib.sha256(Path(ckpt).read_bytes()).hexdigest()[:12]
    evalsuite.emit_reports(report, out, model_id=model_id, seed=cfg.train["seed"])
    print(f"orig_acc={report.orig_acc:.4f} rot_mean={report.mean:.4f} rot_std={report.std:.4f}")
    print(f"reports in {out}")
    return EXIT_OK


def cmd_analyze_tokens(args) -> int:
    cfg = _load_config(args)
    ckpt = args.checkpoint or cfg.paths["checkpoint"]
    if not ckpt:
        raise ConfigError("analyze-tokens needs --checkpoint or a paths.checkpoint config entry")
    root = args.data or cfg.data["root"]
    if not root:
        raise ConfigError("analyze-tokens needs --data or a data.root config entry")
    out = Path(args.out or cfg.paths["out_dir"])
    n_images = args.n_images or cfg.eval["n_images"]

    model, _ = _load_checkpoint_or_exit(ckpt)
    _, test_idx = _split_dataset(cfg, root)
    images = test_idx.images()[:n_images]
    report = evalsuite.token_equivariance(model, images)
    evalsuite.emit_tokens_csv(report, out / "tokens.csv")
    summary = {
        "n_images": int(len(images)),
        "rotations": report.rotations,
        "median": float(f"{report.median():.9g}"),
        "fraction_ge_0.99": float(f"{report.fraction_at_least(0.99):.9g}"),
        "per_rotation_median": {
            str(r): float(f"{report.median(r):.9g}") for r in report.rotations
        },
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "tokens_summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8", newline="\n"
    )
    print(f"token cosine median={summary['median']} fraction>=0.99: {summary['fraction_ge_0.99']}")
    return EXIT_OK


def _op_gradchecks() -> dict[str, float]:
    """One finite-difference check per differentiable primitive."""
    rng = np.random.default_rng(0)
    errs: dict[str, float] = {}

    x = Tensor(rng.standard_normal((1, 2, 6, 6)).astype(np.float32))
    w = Tensor((rng.standard_normal((2, 2, 3, 3)) * 0.5).astype(np.float32))
    b = Tensor(rng.standard_normal(2).astype(np.float32))
    errs["conv2d"] = max(
        tk.grad_check(lambda p: tk.tsum(tk.conv2d(p["x"], p["w"], p["b"], 2, 1)),
                      {"x": x, "w": w, "b": b}).values()
    )
    a = Tensor(rng.standard_normal((3, 4)).astype(np.float32))
    b2 = Tensor(rng.standard_normal((4, 2)).astype(np.float32))
    errs["matmul"] = max(
        tk.grad_check(lambda p: tk.tsum(tk.gelu(tk.matmul(p["a"], p["b"]))), {"a": a, "b": b2}).values()
    )
    s = Tensor(rng.standard_normal((3, 5)).astype(np.float32))
    errs["softmax"] = max(
        tk.grad_check(lambda p: tk.tsum(tk.mul(tk.softmax(p["x"], 1), tk.softmax(p["x"], 1))), {"x": s}).values()
    )
    ln_x = Tensor(rng.standard_normal((2, 6)).astype(np.float32))
    ln_g = Tensor(rng.standard_normal(6).astype(np.float32))
    ln_b = Tensor(rng.standard_normal(6).astype(np.float32))
    errs["layernorm"] = max(
        tk.grad_check(
            lambda p: tk.tsum(tk.mul(tk.layernorm(p["x"], p["g"], p["b"]), tk.layernorm(p["x"], p["g"], p["b"]))),
            {"x": ln_x, "g": ln_g, "b": ln_b},
        ).values()
    )
    g_x = Tensor(rng.standard_normal(8).astype(np.float32))
    errs["gelu"] = max(tk.grad_check(lambda p: tk.tsum(tk.gelu(p["x"])), {"x": g_x}).values())
    ce_x = Tensor(rng.standard_normal((3, 5)).astype(np.float32))
    labels = rng.integers(0, 5, size=3)
    errs["cross_entropy"] = max(
        tk.grad_check(lambda p: tk.cross_entropy(p["x"], labels), {"x": ce_x}).values()
    )
    return errs


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    tol = 1e-3
    rows = list(_op_gradchecks().items())

    vcfg = cfg.vit_config()
    model = vit.build_model(vcfg, cfg.model["seed"])
    rng = np.random.default_rng(cfg.model["seed"])
    # move zero-initialized token parameters off the layernorm singularity
    for name in ("cls", "pos"):
        noise = (rng.standard_normal(model.params[name].shape) * 0.02).astype(np.float32)
        model.params[name] = Tensor(noise, requires_grad=True)
    x = rng.random((2, vcfg.in_channels, vcfg.img_size, vcfg.img_size), dtype=np.float32)
    labels = rng.integers(0, vcfg.n_classes, size=2)
    group_names = [n for n in model.params if n.endswith(("_w", "ring_w", ".w"))][:8]
    group_names += ["cls", "pos", "head.w"]
    sampled = {n: model.params[n] for n in dict.fromkeys(group_names)}

    def f(p):
        merged = dict(model.params)
        dtype = next(iter(p.values())).dtype
        merged = {k: (p[k] if k in p else v.astype(dtype)) for k, v in merged.items()}
        logits = vit.forward(model, Tensor(x, dtype=dtype), params=merged)
        return tk.cross_entropy(logits, labels)

    model_errs = tk.grad_check(f, sampled, eps=1e-3, tol=tol, max_samples_per_param=12, seed=0)
    rows += [(f"model:{k}", v) for k, v in model_errs.items()]

    failed = False
    print(f"{'parameter group':<32} {'max rel err':>12}  status")
    for name, err in rows:
        ok = err < tol
        failed |= not ok
        print(f"{name:<32} {err:>12.3e}  {'pass' if ok else 'FAIL'}")
    return EXIT_CHECK_FAILURE if failed else EXIT_OK


def cmd_params(args) -> int:
    cfg = _load_config(args)
    vcfg = cfg.vit_config()
    counts = {
        name: int(np.prod(vit.param_shape(vcfg, name)))
        for name in vit.param_template(vcfg)
    }
    total = sum(counts.values())
    emb_total = sum(v for k, v in counts.items() if k.startswith("embed."))
    print(f"{'parameter':<28} {'count':>12} {'bytes':>14}")
    for name, n in counts.items():
        print(f"{name:<28} {n:>12} {n * 4:>14}")
    print(f"{'embedding total':<28} {emb_total:>12} {emb_total * 4:>14}")
    print(f"{'model total':<28} {total:>12} {total * 4:>14}")
    if vcfg.embed.variant == "gmr_stack":
        for i, st in enumerate(vcfg.embed.stages):
            c_in = vcfg.in_channels if i == 0 else vcfg.embed.stages[i - 1].c_out
            spec = gmr.ring_spec(st.k, vcfg.embed.sigma_ratio)
            layer_params = st.c_out * c_in * spec.n_rings + st.c_out
            dense = st.c_out * c_in * st.k * st.k + st.c_out
            print(f"stage{i} k={st.k}: gmr {layer_params} vs dense {dense} (ratio {dense / layer_params:.1f}x)")
    return EXIT_OK


def cmd_kernel_dump(args) -> int:
    cfg = _load_config(args)
    ckpt = args.checkpoint or cfg.paths["checkpoint"]
    if not ckpt:
        raise ConfigError("kernel-dump needs --checkpoint or a paths.checkpoint config entry")
    out = Path(args.out or cfg.paths["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    model, _ = _load_checkpoint_or_exit(ckpt)
    emb = model.cfg.embed
    stage_id = int(args.layer) if args.layer is not None else 0

    if emb.variant == "linear":
        kernel = model.params["embed.proj_w"].data
        kind = "dense"
    else:
        if not 0 <= stage_id < len(emb.stages):
            raise ConfigError(f"--layer {stage_id} out of range; model has {len(emb.stages)} stages")
        st = emb.stages[stage_id]
        c_in = model.cfg.in_channels if stage_id == 0 else emb.stages[stage_id - 1].c_out
        kind = st.kind
        if st.kind == "gmr":
            basis = model.bases[stage_id]
            layer = gmr.GmrConvLayer(
                spec=basis.spec, c_in=c_in, c_out=st.c_out,
                ring_weights=model.params[f"embed.stage{stage_id}.ring_w"],
                bias=model.params[f"embed.stage{stage_id}.b"],
                stride=st.stride, pad=st.pad,
            )
            with tk.no_grad():
                kernel = gmr.synthesize_kernels(layer, basis).data
            for r in range(basis.spec.n_rings):
                lines = gmr.grid_csv_lines(basis.values[r])
                (out / f"basis_ring{r}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
        else:
            kernel = model.params[f"embed.stage{stage_id}.w"].data

    for o in range(min(kernel.shape[0], 4)):
        for c in range(min(kernel.shape[1], 4)):
            lines = gmr.grid_csv_lines(kernel[o, c])
            (out / f"kernel_o{o}_c{c}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")

    report = gmr.kernel_invariance_report(kernel)
    report["kind"] = kind
    report["k"] = int(kernel.shape[-1])
    (out / "invariance.json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8", newline="\n"
    )
    print(f"dumped {kind} kernels (k={kernel.shape[-1]}) to {out}")
    print(f"rot90_dev={report['rot90_dev']:.3e} flip_dev={report['flip_dev']:.3e} "
          f"continuous_dev={report['continuous_dev']:.3e}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="equipatch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration file")
        p.add_argument("--seed", type=int, help="override model and train seeds")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("synth-data", help="generate the synthetic dataset folder")
    common(p)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("train", help="train a model and write checkpoint + history")
    common(p)
    p.add_argument("--data", help="dataset folder (class-per-subdirectory)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval-rotation", help="rotation sweep over the test split")
    common(p)
    p.add_argument("--checkpoint", help="model checkpoint path")
    p.add_argument("--data", help="dataset folder")
    p.add_argument("--angles", help="comma-separated angle override, e.g. 0,90,180,270")
    p.set_defaults(fn=cmd_eval_rotation)

    p = sub.add_parser("analyze-tokens", help="token equivariance analysis under quarter turns")
    common(p)
    p.add_argument("--checkpoint", help="model checkpoint path")
    p.add_argument("--data", help="dataset folder")
    p.add_argument("--n-images", type=int, help="number of test images to analyze")
    p.set_defaults(fn=cmd_analyze_tokens)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(p)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter and memory accounting table")
    common(p)
    p.set_defaults(fn=cmd_params)

    p = sub.add_parser("kernel-dump", help="export kernels and basis slices as CSV grids")
    common(p)
    p.add_argument("--checkpoint", help="model checkpoint path")
    p.add_argument("--layer", help="embedding stage index (default 0)")
    p.set_defaults(fn=cmd_kernel_dump)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointFormatError, CheckpointCorruptionError) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except TrainingDivergedError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except EquipatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILURE


def console_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_entry()
