"""Paired toy-scale trainings that isolate one ingredient at a time.

Studies:

``ca``              colour-alignment weight on vs. zero
``structure``       structure weight on vs. zero
``condition``       vision condition vs. a free learned embedding
``generalization``  trained on scene A vs. trained on scene B, both tested on B
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import toy
from .backbone import GenerativeBackbone
from .imaging import save_image
from .losses import LossWeights
from .manifest import RunManifest
from .metrics import BlockMatchingFlow, evaluate_images
from .training import TrainConfig, build_condition, build_dataset, train

STUDIES = ("ca", "structure", "condition", "generalization")

# Lower is better for every metric reported.
EXPECTED = {"ca": "chd", "structure": "flow_l1"}


@dataclass
class ArmResult:
    study: str
    arm: str
    seed: int
    chd: float
    dsd: float
    flow_l1: float
    final_total: float


def arms(study: str, cfg: TrainConfig) -> dict[str, tuple[TrainConfig, str]]:
    """Map arm name to ``(config, training scene key)``."""
    w = cfg.weights
    if study == "ca":
        return {
            "with_ca": (cfg, "A"),
            "without_ca": (cfg.replace(weights=LossWeights(w.content, w.style, w.structure, 0.0)), "A"),
        }
    if study == "structure":
        return {
            "with_structure": (cfg, "A"),
            "without_structure": (cfg.replace(weights=LossWeights(w.content, w.style, 0.0, w.color_alignment)), "A"),
        }
    if study == "condition":
        return {
            "vision": (cfg.replace(condition="vision"), "A"),
            "learned": (cfg.replace(condition="learned"), "A"),
        }
    if study == "generalization":
        return {"train_A_test_B": (cfg, "A"), "train_B_test_B": (cfg, "B")}
    raise ValueError(f"unknown study {study!r}; expected one of {STUDIES}")


def _write_scenes(root: Path, seed: int, size: int) -> dict:
    scenes = {}
    for key, offset in (("A", 0), ("B", 1000)):
        d = root / f"scene_{key}"
        scene_dir, style_path = toy.write_scene(d, size=size, seed=seed + offset, style_seed=seed + 500)
        scenes[key] = (scene_dir, style_path)
    return scenes


@torch.no_grad()
def stylize_views(backbone: GenerativeBackbone, condition, views: dict[str, torch.Tensor], style) -> dict:
    c = condition(style)
    return {n: backbone.stylize(v, c) for n, v in views.items()}


def run_arm(study: str, arm: str, cfg: TrainConfig, train_scene, test_scene, out_dir: Path, seed: int) -> ArmResult:
    backbone, encoder, extractor = toy.toy_models()
    ds = build_dataset(*train_scene, cfg.resolution)
    condition = build_condition(cfg, encoder, backbone)
    ck = train(ds, cfg, backbone, encoder, extractor, condition=condition, out_dir=out_dir,
               log_path=out_dir / "losses.jsonl")

    test_ds = build_dataset(*test_scene, cfg.resolution)
    views = {p.name: test_ds[i] for i, p in enumerate(test_ds.paths)}
    style = ds.style  # the style is shared between scenes A and B
    stylized = stylize_views(backbone, condition, views, style)
    for n, img in stylized.items():
        save_image(img, out_dir / "stylized" / n)
    report = evaluate_images(stylized, views, style, encoder, BlockMatchingFlow(), scene=study, style_name=arm)
    report.write(out_dir)
    return ArmResult(study, arm, seed, report.mean_chd, report.mean_dsd, report.mean_flow_l1,
                     ck.log[-1]["total"] if ck.log else float("nan"))


def run_study(study: str, cfg: TrainConfig, seeds, out_root, command=None) -> list[ArmResult]:
    out_root = Path(out_root)
    results = []
    for seed in seeds:
        scenes = _write_scenes(out_root / study / f"seed_{seed}" / "data", seed, cfg.resolution)
        for arm, (arm_cfg, train_key) in arms(study, cfg.replace(seed=seed)).items():
            out = out_root / study / f"seed_{seed}" / arm
            out.mkdir(parents=True, exist_ok=True)
            res = run_arm(study, arm, arm_cfg, scenes[train_key], scenes["B" if study == "generalization" else "A"],
                          out, seed)
            results.append(res)
            m = RunManifest(command=list(command or []) + [f"arm={arm}"], config=arm_cfg.to_dict(), seed=seed)
            m.add_inputs(*scenes[train_key])
            m.add_artifacts(out, out)
            m.write(out)
    return results


def direction_votes(results: list[ArmResult]) -> dict[str, dict]:
    """Per study with an expected direction: seeds where the full arm scores lower."""
    out = {}
    by = {}
    for r in results:
        by.setdefault(r.study, {}).setdefault(r.seed, {})[r.arm] = r
    for study, metric in EXPECTED.items():
        if study not in by:
            continue
        on, off = list(arms(study, TrainConfig(resolution=32)).keys())
        wins = [getattr(v[on], metric) < getattr(v[off], metric) for v in by[study].values()]
        out[study] = {"metric": metric, "wins": int(sum(wins)), "seeds": len(wins),
                      "majority": sum(wins) * 2 > len(wins)}
    return out


def write_table(results: list[ArmResult], out_root) -> tuple[Path, Path]:
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    pc = out_root / "ablation.csv"
    with open(pc, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["study", "arm", "seed", "chd", "dsd", "flow_l1", "final_total"])
        for r in results:
            wr.writerow([r.study, r.arm, r.seed, repr(r.chd), repr(r.dsd), repr(r.flow_l1), repr(r.final_total)])
    pj = out_root / "ablation.json"
    pj.write_text(json.dumps({"arms": [asdict(r) for r in results], "directions": direction_votes(results)},
                             indent=2))
    return pc, pj


def format_table(results: list[ArmResult]) -> str:
    lines = [f"{'study':<15}{'arm':<20}{'seed':>5}{'CHD':>10}{'DSD':>10}{'flow-L1':>10}"]
    for r in results:
        lines.append(f"{r.study:<15}{r.arm:<20}{r.seed:>5}{r.chd:>10.4f}{r.dsd:>10.4f}{r.flow_l1:>10.4f}")
    means = {}
    for r in results:
        means.setdefault((r.study, r.arm), []).append(r)
    lines.append("")
    for (study, arm), rs in means.items():
        lines.append(
            f"{study:<15}{arm:<20}{'mean':>5}{np.mean([r.chd for r in rs]):>10.4f}"
            f"{np.mean([r.dsd for r in rs]):>10.4f}{np.mean([r.flow_l1 for r in rs]):>10.4f}"
        )
    return "\n".join(lines)
