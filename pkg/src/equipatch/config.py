"""Single-file run configuration shared by every subcommand.

The file is JSON with five sections (model, train, data, eval, paths);
sections irrelevant to a subcommand are ignored by it.  Every key has a
default, and unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from . import data as data_mod, trainer, vit
from .errors import ConfigError

MODEL_DEFAULTS: dict = {
    "preset": "tiny",  # "tiny" | "base"
    "variant": "gmr_stack",  # "gmr_stack" | "conv_stack" | "linear"
    "plan": "6,11",  # one of vit.STAGE_PLANS when stages not given explicitly
    "stages": None,  # explicit [{kind,k,stride,pad,c_out}, ...] overrides plan
    "img_size": None,
    "in_channels": None,
    "embed_dim": None,
    "depth": None,
    "heads": None,
    "mlp_ratio": None,
    "n_classes": None,
    "patch": 16,
    "inter_stage_activation": "gelu",
    "sigma_ratio": 0.5,
    "seed": 0,
}

TRAIN_DEFAULTS: dict = {
    "lr0": 5e-5,
    "epochs": 10,
    "batch_size": 64,
    "weight_decay": 0.01,
    "betas": [0.9, 0.999],
    "eps": 1e-8,
    "lr_min": 0.0,
    "seed": 0,
    "shuffle": True,
}

DATA_DEFAULTS: dict = {
    "kind": "synthetic",  # "synthetic" | "folder"
    "n_classes": 9,
    "img_size": 64,
    "channels": 3,
    "seed": 0,
    "n_per_class": 600,
    "root": None,  # folder datasets: path to the class-per-subdir root
    "split_frac": 1.0 / 6.0,
    "split_seed": 0,
}

EVAL_DEFAULTS: dict = {
    "angles": list(range(0, 360, 10)),
    "fill": "train_mean",  # "train_mean" | "data_mean" | [r, g, b]
    "n_images": 20,
    "batch_size": 256,
}

PATHS_DEFAULTS: dict = {
    "out_dir": "runs/out",
    "checkpoint": None,
}

_SECTIONS = {
    "model": MODEL_DEFAULTS,
    "train": TRAIN_DEFAULTS,
    "data": DATA_DEFAULTS,
    "eval": EVAL_DEFAULTS,
    "paths": PATHS_DEFAULTS,
}

_PRESETS = {
    "tiny": {"img_size": 64, "in_channels": 3, "embed_dim": 128, "depth": 4, "heads": 4,
             "mlp_ratio": 4.0, "n_classes": 9},
    "base": {"img_size": 224, "in_channels": 3, "embed_dim": 768, "depth": 12, "heads": 12,
             "mlp_ratio": 4.0, "n_classes": 9},
}


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    def vit_config(self) -> vit.ViTConfig:
        m = self.model
        preset = m["preset"]
        if preset not in _PRESETS:
            raise ConfigError(f"unknown model preset {preset!r}")
        resolved = dict(_PRESETS[preset])
        for key in resolved:
            if m.get(key) is not None:
                resolved[key] = m[key]
        variant = m["variant"]
        if variant == "linear":
            emb = vit.PatchEmbedConfig(
                variant="linear", patch=m["patch"],
                inter_stage_activation=m["inter_stage_activation"], sigma_ratio=m["sigma_ratio"],
            )
        else:
            kind = "gmr" if variant == "gmr_stack" else "dense"
            if m["stages"] is not None:
                stages = tuple(vit.EmbedStage(**s) for s in m["stages"])
            else:
                plan = m["plan"]
                if plan not in vit.STAGE_PLANS:
                    raise ConfigError(f"unknown stage plan {plan!r}; known: {sorted(vit.STAGE_PLANS)}")
                stages = vit.make_stages(plan, kind, vit.stage_channels(plan, resolved["embed_dim"]))
            emb = vit.PatchEmbedConfig(
                variant=variant, stages=stages,
                inter_stage_activation=m["inter_stage_activation"], sigma_ratio=m["sigma_ratio"],
            )
        return vit.ViTConfig(
            img_size=resolved["img_size"], in_channels=resolved["in_channels"],
            embed_dim=resolved["embed_dim"], depth=resolved["depth"], heads=resolved["heads"],
            mlp_ratio=resolved["mlp_ratio"], n_classes=resolved["n_classes"], embed=emb,
        )

    def train_config(self) -> trainer.TrainConfig:
        t = self.train
        return trainer.TrainConfig(
            lr0=t["lr0"], epochs=t["epochs"], batch_size=t["batch_size"],
            weight_decay=t["weight_decay"], betas=tuple(t["betas"]), eps=t["eps"],
            lr_min=t["lr_min"], seed=t["seed"], shuffle=t["shuffle"],
        )

    def synth_spec(self) -> data_mod.SynthSpec:
        d = self.data
        return data_mod.SynthSpec(
            n_classes=d["n_classes"], img_size=d["img_size"], channels=d["channels"], seed=d["seed"],
        )


def _merge_section(name: str, defaults: dict, overrides: dict) -> dict:
    unknown = set(overrides) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in [{name}] section: {sorted(unknown)}")
    merged = {k: json.loads(json.dumps(v)) for k, v in defaults.items()}
    merged.update(overrides)
    return merged


def from_dict(raw: dict) -> RunConfig:
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    sections = {}
    for name, defaults in _SECTIONS.items():
        part = raw.get(name, {})
        if not isinstance(part, dict):
            raise ConfigError(f"config section [{name}] must be an object")
        sections[name] = _merge_section(name, defaults, part)
    cfg = RunConfig(**sections)
    cfg.vit_config()  # validate model geometry eagerly
    cfg.train_config()
    if cfg.data["kind"] not in ("synthetic", "folder"):
        raise ConfigError(f"data.kind must be 'synthetic' or 'folder', got {cfg.data['kind']!r}")
    fill = cfg.eval["fill"]
    if not (fill in ("train_mean", "data_mean") or (isinstance(fill, list) and len(fill) == cfg.data["channels"])):
        raise ConfigError(f"eval.fill must be 'train_mean', 'data_mean', or a per-channel list, got {fill!r}")
    return cfg


def load_run_config(path) -> RunConfig:
    p = Path(path)
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {p}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    return from_dict(raw)


def default_config() -> RunConfig:
    return from_dict({})
