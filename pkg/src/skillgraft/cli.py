"""Experiment orchestration: config handling, cached pipeline stages and recipes.

Usage::

    skillgraft run tableone --config configs/standard_suite.json --out runs/std
    skillgraft --recipe sweep --config configs/standard_suite.json --seed 3

Every recipe writes ``<out>/reports/<recipe>.json`` (plus CSV curves) and
records its stages in ``<out>/manifest.json``.  Stage artifacts (pre-trained
and fine-tuned checkpoints, mask logits, regions) are reused on later runs
when their hash still matches the manifest, so interrupted runs resume.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import continual as cl
from . import evalmetrics as em
from . import grafting as gr
from . import multitask as mtk
from . import nncore
from . import store
from . import synthtasks as st
from . import theory
from .errors import ConfigError, SkillGraftError, StoreError
from .nncore import ModelSpec, OptimizerConfig, ParameterVector

log = logging.getLogger("skillgraft")

RECIPES = ("tableone", "sweep", "retrain", "ood", "adamreg", "multitask", "continual", "track", "theory", "fisher")

_OPT = {
    "algorithm": "sgd",
    "learning_rate": 0.5,
    "batch_size": 8,
    "weight_decay": 1e-4,
    "l1_anchor_strength": 0.0,
    "adam_beta1": 0.9,
    "adam_beta2": 0.999,
    "adam_eps": 1e-8,
}

DEFAULT_CONFIG: dict = {
    "recipe": "tableone",
    "out": "runs/default",
    "seeds": [0, 1, 2, 3, 4],
    "world": {"latent_dim": 3, "obs_dim": 64, "obs_noise": 0.5, "seed": 0},
    "model": {
        "hidden_widths": [256, 256],
        "activation": "tanh",
        "layernorm_enabled": True,
        "head_mode": "frozen_random",
        "freeze_first_layer": False,
    },
    "pretrain": {
        "per_class": 512,
        "eval_per_class": 256,
        "data_seed": 0,
        "init_seed": 0,
        "optimizer": {**_OPT, "learning_rate": 0.05, "batch_size": 32, "steps": 6000, "seed": 0},
    },
    "tasks": {"classes": [2, 3, 4, 3], "rho": 0.9, "family_seed_base": 100, "pair_seed_base": 200, "k_test": 256},
    "shots": [16, 256],
    "finetune": {**_OPT, "steps_per_class_shot": 16, "cap_shots": 512},
    "mask": {
        "steps": 100,
        "learning_rate": 1e4,
        "batch_size": 1024,
        "label_source": "ground_truth",
        "init_value": -10.0,
        "threshold": 0.5,
        "sparsity_budget": 0.01,
    },
    "num_bins": 10,
    "sweep": {
        "shots": [16],
        "methods": ["learned", "movement_topk", "random"],
        "fractions": [0.001, 0.0025, 0.005, 0.01, 0.025, 0.05, 0.1, 1.0],
        "lth_densities": [0.01, 0.1, 0.5],
    },
    "retrain": {"shots": [16]},
    "ood": {"shots": [16, 256], "shifts": [0.1, 1.0], "ood_seeds": [0, 1, 2], "alphas": [0.0, 0.25, 0.5, 0.75, 1.0]},
    "adamreg": {
        "shots": [16],
        "optimizer": {**_OPT, "algorithm": "adamw", "learning_rate": 1e-3, "weight_decay": 0.0, "l1_anchor_strength": 1e-3},
        "fractions": [0.001, 0.01, 0.1],
    },
    # within-family pairs, cross-family pairs and one four-task group
    "multitask": {
        "shots": 64,
        # per-task MT regions are sparser than single-task ones: the union of a
        # group must stay small enough not to carry the MT model's shared gains
        "mask_budget": 0.001,
        "purify_steps": 10,
        "purify_learning_rate": 1e6,
        "groups": [[0, 1], [2, 3], [4, 5], [6, 7], [0, 2], [4, 6], [0, 1, 2, 3]]},
    "continual": {"shots": 16, "sequence": [0, 2, 4], "eval_union": "task"},
    "track": {"shots": 16, "tasks": [0, 2, 4, 6], "checkpoints": 20, "window": 5},
    "theory": {
        "shots": [16],
        "q": 2**32,
        "theta_n": 1,
        "delta": 0.05,
        "quant_levels": 256,
        "reference": {"s": 5000, "q": 2**32, "theta_n": 1, "delta": 0.05, "n": 8192},
    },
    "fisher": {"shots": 16, "fractions": [0.01]},
}


# -- configuration -----------------------------------------------------------


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base.get(key), dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be a mapping")
    cfg = _merge(DEFAULT_CONFIG, user)
    cfg = _merge(DEFAULT_CONFIG, {**cfg, **(overrides or {})})
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    if cfg["recipe"] not in RECIPES:
        raise ConfigError(f"unknown recipe {cfg['recipe']!r}; choose from {', '.join(RECIPES)}")
    seeds = cfg["seeds"]
    if not seeds or any(not isinstance(s, int) for s in seeds) or len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be a non-empty list of distinct integers")
    n_tasks = 2 * len(cfg["tasks"]["classes"])
    if not cfg["continual"]["sequence"] or any(not 0 <= t < n_tasks for t in cfg["continual"]["sequence"]):
        raise ConfigError("continual sequence must name tasks of the suite")
    if any(not 0 <= t < n_tasks for t in cfg["track"]["tasks"]):
        raise ConfigError("track names a task outside the suite")
    groups = cfg["multitask"]["groups"]
    if any(not g or len(set(g)) != len(g) or any(not 0 <= t < n_tasks for t in g) for g in groups):
        raise ConfigError("multitask groups must be non-empty sets of suite task indices")
    if cfg["continual"]["eval_union"] not in cl.EVAL_UNIONS:
        raise ConfigError(f"eval_union must be one of {cl.EVAL_UNIONS}")
    # constructing the typed configs surfaces range and type errors early
    try:
        _model_spec(cfg, 8)
        _opt(cfg["finetune"], 1, 0)
        _opt(cfg["adamreg"]["optimizer"], 1, 0)
        _opt(cfg["pretrain"]["optimizer"], cfg["pretrain"]["optimizer"]["steps"], 0)
        _mask_cfg(cfg, 0)
    except TypeError as exc:
        raise ConfigError(f"config value of the wrong type: {exc}") from exc


def config_hash(cfg: dict) -> str:
    """Hash of everything that determines artifacts; recipe and output directory excluded."""
    core = {k: v for k, v in cfg.items() if k not in ("recipe", "out")}
    return hashlib.sha256(store.canonical_json(core)).hexdigest()


def _model_spec(cfg: dict, num_classes: int) -> ModelSpec:
    m, w = cfg["model"], cfg["world"]
    return ModelSpec(
        w["obs_dim"],
        tuple(m["hidden_widths"]),
        num_classes,
        m["activation"],
        m["layernorm_enabled"],
        m["head_mode"],
        m["freeze_first_layer"],
    )


def _opt(section: dict, steps: int, seed: int) -> OptimizerConfig:
    keys = ("algorithm", "learning_rate", "batch_size", "weight_decay", "l1_anchor_strength", "adam_beta1", "adam_beta2", "adam_eps")
    return OptimizerConfig(**{k: section[k] for k in keys}, steps=int(steps), seed=int(seed))


def _mask_cfg(cfg: dict, seed: int) -> gr.MaskOptConfig:
    return gr.MaskOptConfig(**cfg["mask"], seed=seed)


# -- cached pipeline ---------------------------------------------------------


class Suite:
    """The standard suite's world, tasks and per-(task, k, seed) artifacts, cached on disk."""

    def __init__(self, cfg: dict, out: Path):
        self.cfg = cfg
        self.out = Path(out)
        self.hash = config_hash(cfg)
        self.manifest_file = self.out / "manifest.json"
        self.manifest = self._open_manifest()
        w = cfg["world"]
        self.world = st.make_world(w["latent_dim"], w["obs_dim"], w["obs_noise"], w["seed"])
        tc = cfg["tasks"]
        self.tasks: list[st.TaskSpec] = []
        self.names: list[str] = []
        for f, K in enumerate(tc["classes"]):
            a = st.make_task(self.world, K, f, seed=tc["family_seed_base"] + f)
            b = st.make_task(self.world, K, f, similarity_to=a, rho=tc["rho"], seed=tc["pair_seed_base"] + f)
            self.tasks += [a, b]
            self.names += [f"f{f}a", f"f{f}b"]
        self.pre_spec = _model_spec(cfg, 8)
        self._pre: ParameterVector | None = None
        self._mem: dict = {}

    # manifest ---------------------------------------------------------------

    def _open_manifest(self) -> dict:
        if self.manifest_file.exists():
            man = store.read_report(self.manifest_file)
            if man.get("config_hash") != self.hash:
                raise ConfigError(f"{self.out} holds a run of a different config; choose another --out")
            return man
        return {
            "config_hash": self.hash,
            "config": {k: v for k, v in self.cfg.items() if k not in ("recipe", "out")},
            "seeds": sorted(self.cfg["seeds"]),
            "versions": {
                "skillgraft": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
            "stages": {},
            "reports": {},
        }

    def _save_manifest(self) -> None:
        store.atomic_write(self.manifest_file, store.canonical_json(self.manifest))

    def _artifact(self, rel: str) -> Path:
        return self.out / "artifacts" / rel

    @staticmethod
    def _digest(path: Path) -> str:
        h = hashlib.sha256(path.read_bytes())
        extra = store.manifest_path(path)
        if extra.exists():
            h.update(extra.read_bytes())
        return h.hexdigest()

    def _done(self, rel: str) -> bool:
        path = self._artifact(rel)
        want = self.manifest["stages"].get(rel)
        return want is not None and path.exists() and self._digest(path) == want

    def _record(self, rel: str) -> None:
        self.manifest["stages"][rel] = self._digest(self._artifact(rel))
        self._save_manifest()

    def _checkpoint_stage(self, rel: str, compute) -> ParameterVector:
        if rel in self._mem:
            return self._mem[rel]
        if self._done(rel):
            pv = store.load_checkpoint(self._artifact(rel))
        else:
            log.info("stage %s", rel)
            pv = compute()
            store.save_checkpoint(pv, self._artifact(rel))
            self._record(rel)
        self._mem[rel] = pv
        return pv

    def record_report(self, recipe: str, path: Path) -> None:
        self.manifest["reports"][recipe] = hashlib.sha256(path.read_bytes()).hexdigest()
        self._save_manifest()

    # models and data ----------------------------------------------------------

    @property
    def pre(self) -> ParameterVector:
        if self._pre is None:
            p = self.cfg["pretrain"]

            def compute():
                ds = st.sample_kshot(st.make_pretrain_task(self.world, 0), p["per_class"], "train", p["data_seed"])
                o = p["optimizer"]
                init = nncore.init_model(self.pre_spec, p["init_seed"])
                return nncore.train(init, self.pre_spec, ds, _opt(o, o["steps"], o["seed"])).final

            self._pre = self._checkpoint_stage("pretrain/pre.grft", compute)
        return self._pre

    def pretrain_data(self, split: str) -> st.Dataset:
        p = self.cfg["pretrain"]
        n = p["per_class"] if split == "train" else p["eval_per_class"]
        return st.sample_kshot(st.make_pretrain_task(self.world, 0), n, split, p["data_seed"])

    def view(self, t: int) -> tuple[ParameterVector, ModelSpec]:
        key = ("view", t)
        if key not in self._mem:
            self._mem[key] = nncore.attach_head(self.pre, self.pre_spec, self.tasks[t].num_classes, self.tasks[t].output_seed)
        return self._mem[key]

    def data(self, t: int, k: int, seed: int) -> tuple[st.Dataset, st.Dataset]:
        key = ("data", t, k, seed)
        if key not in self._mem:
            task = self.tasks[t]
            self._mem[key] = (
                st.sample_kshot(task, k, "train", seed),
                st.sample_kshot(task, self.cfg["tasks"]["k_test"], "test", seed),
            )
        return self._mem[key]

    def steps(self, t: int, k: int) -> int:
        f = self.cfg["finetune"]
        return f["steps_per_class_shot"] * self.tasks[t].num_classes * min(k, f["cap_shots"])

    def ft_cfg(self, t: int, k: int, seed: int) -> OptimizerConfig:
        return _opt(self.cfg["finetune"], self.steps(t, k), seed)

    def _tag(self, t: int, k: int, seed: int) -> str:
        return f"{self.names[t]}_k{k}_s{seed}"

    def ft(self, t: int, k: int, seed: int) -> ParameterVector:
        def compute():
            pre, spec = self.view(t)
            return nncore.train(pre, spec, self.data(t, k, seed)[0], self.ft_cfg(t, k, seed)).final

        return self._checkpoint_stage(f"ft/{self._tag(t, k, seed)}.grft", compute)

    def logits(self, t: int, k: int, seed: int) -> gr.MaskLogits:
        pre, spec = self.view(t)

        def compute():
            lg, _ = gr.optimize_mask(
                pre, self.ft(t, k, seed), gr.GraftRegion.empty(len(pre)), self.data(t, k, seed)[0], spec, _mask_cfg(self.cfg, seed)
            )
            return pre.with_values(lg.eps)

        eps = self._checkpoint_stage(f"masks/{self._tag(t, k, seed)}.grft", compute)
        m = self.cfg["mask"]
        return gr.MaskLogits(eps.values, gr.GraftRegion.empty(len(pre)), m["init_value"], nncore.graftable_mask(spec))

    def region(self, t: int, k: int, seed: int) -> gr.GraftRegion:
        rel = f"regions/{self._tag(t, k, seed)}.gmsk"
        if rel in self._mem:
            return self._mem[rel]
        if self._done(rel):
            r = store.load_region(self._artifact(rel))
        else:
            r = gr.learned_region(self.logits(t, k, seed), _mask_cfg(self.cfg, seed))
            store.save_region(r, self._artifact(rel))
            self._record(rel)
        self._mem[rel] = r
        return r

    def graft(self, t: int, k: int, seed: int) -> ParameterVector:
        return gr.graft_compose(self.view(t)[0], self.ft(t, k, seed), self.region(t, k, seed))

    def retrained(self, t: int, k: int, seed: int) -> ParameterVector:
        def compute():
            pre, spec = self.view(t)
            return gr.retrain_region(pre, spec, self.region(t, k, seed), self.data(t, k, seed)[0], self.ft_cfg(t, k, seed))

        return self._checkpoint_stage(f"retrain/{self._tag(t, k, seed)}.grft", compute)

    def adamreg(self, t: int, k: int, seed: int) -> ParameterVector:
        def compute():
            pre, spec = self.view(t)
            cfg = _opt(self.cfg["adamreg"]["optimizer"], self.steps(t, k), seed)
            return nncore.train(pre, spec, self.data(t, k, seed)[0], cfg).final

        return self._checkpoint_stage(f"adamreg/{self._tag(t, k, seed)}.grft", compute)

    def evaluate(self, params: ParameterVector, t: int, ds) -> em.EvalReport:
        return em.evaluate(params, self.view(t)[1], ds, self.cfg["num_bins"])


# -- aggregation helpers -----------------------------------------------------


def _agg(values) -> dict:
    m, s = em.mean_std(values)
    return {"mean": m, "std": s, "per_seed": [float(v) for v in values]}


def _seeds(cfg: dict) -> list[int]:
    return sorted(cfg["seeds"])


# -- recipes -----------------------------------------------------------------


def recipe_tableone(suite: Suite) -> tuple[dict, dict]:
    results = {}
    for k in suite.cfg["shots"]:
        for t, name in enumerate(suite.names):
            rows = {key: [] for key in ("pre_acc", "ft_acc", "graft_acc", "rel_gain", "pre_ece", "ft_ece", "graft_ece", "agreement", "region_size")}
            for seed in _seeds(suite.cfg):
                pre, spec = suite.view(t)
                _, test = suite.data(t, k, seed)
                ft, g = suite.ft(t, k, seed), suite.graft(t, k, seed)
                e_pre, e_ft = suite.evaluate(pre, t, test), suite.evaluate(ft, t, test)
                e_g = em.evaluate(g, spec, test, suite.cfg["num_bins"], reference=("ft", ft))
                rows["pre_acc"].append(e_pre.accuracy)
                rows["ft_acc"].append(e_ft.accuracy)
                rows["graft_acc"].append(e_g.accuracy)
                rows["rel_gain"].append(em.rel_gain(e_g.accuracy, e_pre.accuracy, e_ft.accuracy))
                rows["pre_ece"].append(e_pre.ece)
                rows["ft_ece"].append(e_ft.ece)
                rows["graft_ece"].append(e_g.ece)
                rows["agreement"].append(e_g.agreement_with[1])
                rows["region_size"].append(len(suite.region(t, k, seed)))
            results[f"{name}_k{k}"] = {"task": name, "k": k, **{key: _agg(v) for key, v in rows.items()}}
    header = ["task", "k", "ft_acc", "graft_acc", "rel_gain", "ft_ece", "graft_ece", "agreement"]
    rows = [[r["task"], r["k"]] + [r[h]["mean"] for h in header[2:]] for r in results.values()]
    return {"tasks": results}, {"table": (header, rows)}


def recipe_sweep(suite: Suite) -> tuple[dict, dict]:
    sc = suite.cfg["sweep"]
    fr = sc["fractions"]
    results, curves = {}, {}
    for k in sc["shots"]:
        for t, name in enumerate(suite.names):
            pre, spec = suite.view(t)
            per = {m: [] for m in sc["methods"]}
            bias, lth_learned, lth_move = [], [], []
            ft_acc = []
            for seed in _seeds(suite.cfg):
                train, test = suite.data(t, k, seed)
                ft = suite.ft(t, k, seed)
                ft_acc.append(em.accuracy(ft, spec, test))
                lg = suite.logits(t, k, seed)
                for m in sc["methods"]:
                    regs = em.sweep_regions(pre, ft, spec, m, fr, seed, logits=lg if m == "learned" else None)
                    per[m].append([em.accuracy(gr.graft_compose(pre, ft, r), spec, test) for r in regs])
                bias.append(em.accuracy(gr.graft_compose(pre, ft, gr.bias_region(pre, spec)), spec, test))
                dens = sc["lth_densities"]
                lth_learned.append([em.accuracy(gr.lth_prune(ft, gr.project_sparsity(lg, d)), spec, test) for d in dens])
                lth_move.append([em.accuracy(gr.lth_prune(ft, gr.movement_region(pre, ft, d, spec)), spec, test) for d in dens])
            entry = {"task": name, "k": k, "chance": 1.0 / suite.tasks[t].num_classes, "ft_acc": _agg(ft_acc)}
            for m in sc["methods"]:
                curve = em.SweepCurve.from_samples(fr, np.array(per[m]).T)
                entry[m] = [{"fraction": p.x, "mean": p.y_mean, "std": p.y_std} for p in curve.points]
                curves[f"{name}_k{k}_{m}"] = curve.rows()
            entry["bias_only"] = {"fraction": len(gr.bias_region(pre, spec)) / int(nncore.graftable_mask(spec).sum()), **_agg(bias)}
            entry["lth"] = {
                "densities": list(sc["lth_densities"]),
                "learned": [_agg(col) for col in np.array(lth_learned).T],
                "movement_topk": [_agg(col) for col in np.array(lth_move).T],
            }
            results[f"{name}_k{k}"] = entry
    return {"fractions": list(fr), "tasks": results}, curves


def recipe_retrain(suite: Suite) -> tuple[dict, dict]:
    results = {}
    for k in suite.cfg["retrain"]["shots"]:
        for t, name in enumerate(suite.names):
            rows = {key: [] for key in ("ft_acc", "graft_acc", "retrain_acc", "ft_ece", "graft_ece", "retrain_ece")}
            for seed in _seeds(suite.cfg):
                _, test = suite.data(t, k, seed)
                for label, params in (("ft", suite.ft(t, k, seed)), ("graft", suite.graft(t, k, seed)), ("retrain", suite.retrained(t, k, seed))):
                    e = suite.evaluate(params, t, test)
                    rows[f"{label}_acc"].append(e.accuracy)
                    rows[f"{label}_ece"].append(e.ece)
            results[f"{name}_k{k}"] = {"task": name, "k": k, **{key: _agg(v) for key, v in rows.items()}}
    return {"tasks": results}, {}


def recipe_ood(suite: Suite) -> tuple[dict, dict]:
    oc = suite.cfg["ood"]
    results, curves = {}, {}
    for k in oc["shots"]:
        for t, name in enumerate(suite.names):
            pre, spec = suite.view(t)
            per_shift = {}
            wise_ft, wise_g = [], []
            for shift in oc["shifts"]:
                ft_acc, g_acc = [], []
                for seed in _seeds(suite.cfg):
                    ft, g = suite.ft(t, k, seed), suite.graft(t, k, seed)
                    a_ft, a_g = [], []
                    for s in oc["ood_seeds"]:
                        ds = st.sample_kshot(st.make_ood_task(suite.tasks[t], shift, s), suite.cfg["tasks"]["k_test"], "test", seed)
                        a_ft.append(em.accuracy(ft, spec, ds))
                        a_g.append(em.accuracy(g, spec, ds))
                    ft_acc.append(float(np.mean(a_ft)))
                    g_acc.append(float(np.mean(a_g)))
                per_shift[repr(float(shift))] = {
                    "shift": float(shift),
                    "ft_acc": _agg(ft_acc),
                    "graft_acc": _agg(g_acc),
                    "gap": _agg(np.array(g_acc) - np.array(ft_acc)),
                }
            big = max(oc["shifts"])
            for seed in _seeds(suite.cfg):
                _, test = suite.data(t, k, seed)
                ood = st.sample_kshot(st.make_ood_task(suite.tasks[t], big, oc["ood_seeds"][0]), suite.cfg["tasks"]["k_test"], "test", seed)
                wise_ft.append(em.interpolation_curve(pre, suite.ft(t, k, seed), oc["alphas"], test, ood, spec))
                wise_g.append(em.interpolation_curve(pre, suite.graft(t, k, seed), oc["alphas"], test, ood, spec))
            wise = {}
            for label, cs in (("wise_ft", wise_ft), ("wise_graft", wise_g)):
                idm = np.mean([c.id_accuracy for c in cs], axis=0)
                oodm = np.mean([c.ood_accuracy for c in cs], axis=0)
                wise[label] = {"alphas": list(oc["alphas"]), "id_accuracy": idm.tolist(), "ood_accuracy": oodm.tolist()}
                curves[f"{name}_k{k}_{label}"] = em.InterpolationCurve(tuple(oc["alphas"]), tuple(idm), tuple(oodm)).rows()
            results[f"{name}_k{k}"] = {"task": name, "k": k, "shifts": per_shift, "wise_shift": big, **wise}
    return {"tasks": results}, curves


def recipe_adamreg(suite: Suite) -> tuple[dict, dict]:
    ac = suite.cfg["adamreg"]
    results = {}
    for k in ac["shots"]:
        for t, name in enumerate(suite.names):
            pre, spec = suite.view(t)
            plain = {f: [] for f in ac["fractions"]}
            reg = {f: [] for f in ac["fractions"]}
            full_plain, full_reg, l1_plain, l1_reg = [], [], [], []
            for seed in _seeds(suite.cfg):
                _, test = suite.data(t, k, seed)
                ft, ar = suite.ft(t, k, seed), suite.adamreg(t, k, seed)
                full_plain.append(em.accuracy(ft, spec, test))
                full_reg.append(em.accuracy(ar, spec, test))
                l1_plain.append(float(np.abs(ft.values - pre.values).sum()))
                l1_reg.append(float(np.abs(ar.values - pre.values).sum()))
                for f in ac["fractions"]:
                    plain[f].append(em.accuracy(gr.graft_compose(pre, ft, gr.movement_region(pre, ft, f, spec)), spec, test))
                    reg[f].append(em.accuracy(gr.graft_compose(pre, ar, gr.movement_region(pre, ar, f, spec)), spec, test))
            results[f"{name}_k{k}"] = {
                "task": name,
                "k": k,
                "ft_acc": _agg(full_plain),
                "adamreg_acc": _agg(full_reg),
                "ft_movement_l1": _agg(l1_plain),
                "adamreg_movement_l1": _agg(l1_reg),
                "movement_graft": [
                    {"fraction": f, "ft": _agg(plain[f]), "adamreg": _agg(reg[f])} for f in ac["fractions"]
                ],
            }
    return {"tasks": results}, {}


def recipe_multitask(suite: Suite) -> tuple[dict, dict]:
    mc = suite.cfg["multitask"]
    k = mc["shots"]
    n = len(suite.tasks)
    groups_cfg = [list(g) for g in mc["groups"]]
    group_rel = [[] for _ in groups_cfg]
    other_rel = [[] for _ in groups_cfg]
    pure_rel = [[] for _ in groups_cfg]
    pure_other = [[] for _ in groups_cfg]
    sizes = [[] for _ in groups_cfg]
    within, cross, overlaps, transfers = [], [], [], []
    for seed in _seeds(suite.cfg):
        col = mtk.TaskCollection(
            tuple(mtk.MTTask(suite.tasks[t], *suite.data(t, k, seed), suite.names[t]) for t in range(n)), suite.pre_spec
        )
        pre_st = mtk.stack_models(suite.pre, col)
        # joint budget = sum of the single-task budgets
        cfg = _opt(suite.cfg["finetune"], sum(suite.steps(t, k) for t in range(n)), seed)
        mt = suite._checkpoint_stage(f"multitask/mt_k{k}_s{seed}.grft", lambda: mtk.train_mt(pre_st, col, cfg).params)
        mcfg = replace(_mask_cfg(suite.cfg, seed), sparsity_budget=mc["mask_budget"])
        purify_cfg = replace(mcfg, learning_rate=mc["purify_learning_rate"])
        regs = []
        for t in range(n):
            rel = f"multitask/region_t{t}_k{k}_s{seed}.gmsk"
            if suite._done(rel):
                regs.append(store.load_region(suite._artifact(rel)))
                continue
            pre_t, spec_t = mtk.task_view(pre_st, col, t)
            mt_t, _ = mtk.task_view(mt, col, t)
            _, r = gr.optimize_mask(pre_t, mt_t, gr.GraftRegion.empty(len(pre_t)), col.tasks[t].train, spec_t, mcfg)
            r = mtk.stacked_region(r, len(mt))
            store.save_region(r, suite._artifact(rel))
            suite._record(rel)
            regs.append(r)
        ov = mtk.overlap_matrix(regs, suite.names).values
        overlaps.append(ov)
        transfers.append(mtk.transfer_matrix(pre_st, mt, regs, col).values)
        within.append(float(np.mean([ov[i, j] for i in range(n) for j in range(n) if i != j and i // 2 == j // 2])))
        cross.append(float(np.mean([ov[i, j] for i in range(n) for j in range(n) if i // 2 != j // 2])))
        for g, grp in enumerate(groups_cfg):
            u = mtk.union_region(regs, grp)
            pu = mtk.purify_union(pre_st, mt, u, col, grp, mc["purify_steps"], purify_cfg)
            tm = mtk.transfer_matrix(pre_st, mt, [u, pu], col).values
            rest = [j for j in range(n) if j not in grp]
            group_rel[g].append(float(np.mean(tm[0, grp])))
            other_rel[g].append(float(np.mean(tm[0, rest])))
            pure_rel[g].append(float(np.mean(tm[1, grp])))
            pure_other[g].append(float(np.mean(tm[1, rest])))
            sizes[g].append(len(u))
    groups = []
    for g, grp in enumerate(groups_cfg):
        groups.append(
            {
                "tasks": [suite.names[j] for j in grp],
                "union_size": _agg(sizes[g]),
                "group_rel_gain": _agg(group_rel[g]),
                "non_group_rel_gain": _agg(other_rel[g]),
                "purified_group_rel_gain": _agg(pure_rel[g]),
                "purified_non_group_rel_gain": _agg(pure_other[g]),
                "purification_drop": _agg(np.array(group_rel[g]) - np.array(pure_rel[g])),
            }
        )
    mean_ov = np.mean(overlaps, axis=0)
    header = ["task"] + suite.names
    rows = [[suite.names[i]] + mean_ov[i].tolist() for i in range(n)]
    report = {
        "k": k,
        "overlap_within_pair": _agg(within),
        "overlap_cross_family": _agg(cross),
        "overlap_matrix_mean": mean_ov.tolist(),
        "transfer_matrix_mean": np.mean(transfers, axis=0).tolist(),
        "task_ids": suite.names,
        "groups": groups,
    }
    trans = np.mean(transfers, axis=0)
    return report, {"overlap": (header, rows), "transfer": (header, [[suite.names[i]] + trans[i].tolist() for i in range(n)])}


def recipe_continual(suite: Suite) -> tuple[dict, dict]:
    cc = suite.cfg["continual"]
    k = cc["shots"]
    seq_ids = cc["sequence"]
    out = {}
    curves = {}
    for mode in cl.MODES:
        mats, first_final, first_after, identical, forgetting = [], [], [], [], []
        cost, budget, heads = [], [], []
        for seed in _seeds(suite.cfg):
            seq = [cl.SequenceTask(suite.tasks[t], *suite.data(t, k, seed), suite.names[t]) for t in seq_ids]
            cfgs = [suite.ft_cfg(t, k, seed) for t in seq_ids]
            res = cl.run_continual(suite.pre, suite.pre_spec, seq, mode, _mask_cfg(suite.cfg, seed), cfgs, cc["eval_union"], keep_vectors=True)
            a = res.accuracy_matrix
            mats.append(a)
            first_after.append(a[0, 0])
            first_final.append(a[-1, 0])
            forgetting.append(res.forgetting.tolist())
            identical.append(bool(all(np.array_equal(res.graft_vectors[0][0], row[0]) for row in res.graft_vectors)))
            cost.append(res.localization_cost)
            budget.append(res.budget_total if res.budget_total is not None else 0)
            heads.append(res.head_params)
        mean = np.mean(np.array(mats), axis=0)  # NaN pattern (above the diagonal) is shared by all seeds
        out[mode] = {
            "accuracy_matrix_mean": [[None if np.isnan(v) else float(v) for v in row] for row in mean],
            "first_task_after_first": _agg(first_after),
            "first_task_final": _agg(first_final),
            "forgetting_per_seed": forgetting,
            "first_task_vector_identical": identical,
            "localization_cost": cost,
            "budget_total": budget,
            "head_params": heads,
        }
        curves[f"{mode}_accuracy"] = (["after_task"] + [suite.names[t] for t in seq_ids], [[suite.names[seq_ids[i]]] + list(r) for i, r in enumerate(mean.tolist())])
    return {"k": k, "sequence": [suite.names[t] for t in seq_ids], "eval_union": cc["eval_union"], "modes": out}, curves


def recipe_track(suite: Suite) -> tuple[dict, dict]:
    tc = suite.cfg["track"]
    k = tc["shots"]
    results, curves = {}, {}
    for t in tc["tasks"]:
        name = suite.names[t]
        pre, spec = suite.view(t)
        learned_series, move_series, steps = [], [], None
        for seed in _seeds(suite.cfg):
            train, test = suite.data(t, k, seed)
            cfg = suite.ft_cfg(t, k, seed)
            every = max(1, cfg.steps // tc["checkpoints"])
            traj = nncore.train(pre, spec, train, cfg, checkpoint_every=every)
            if not np.array_equal(traj.final.values, suite.ft(t, k, seed).values):
                raise SkillGraftError("tracked run diverged from the cached fine-tuning run")
            for s, p in traj.checkpoints:
                rel = f"track/{suite._tag(t, k, seed)}_step{s}.grft"
                if not suite._done(rel):
                    store.save_checkpoint(p, suite._artifact(rel))
                    suite._record(rel)
            final = traj.final
            regions = [suite.region(t, k, seed), gr.movement_region(pre, final, suite.cfg["mask"]["sparsity_budget"] or 0.01, spec)]
            tr = em.checkpoint_track(traj, regions, pre, spec, test)
            steps = tr.steps
            learned_series.append(tr.series[0])
            move_series.append(tr.series[1])
        lm, mm = np.mean(learned_series, axis=0), np.mean(move_series, axis=0)
        results[name] = {
            "task": name,
            "k": k,
            "steps": steps,
            "learned_region": lm.tolist(),
            "learned_region_smoothed": em.moving_average(lm, tc["window"]).tolist(),
            "movement_region": mm.tolist(),
            "movement_region_smoothed": em.moving_average(mm, tc["window"]).tolist(),
        }
        curves[f"{name}_k{k}"] = (["step", "learned", "movement_topk"], [[s, a, b] for s, a, b in zip(steps, lm.tolist(), mm.tolist())])
    return {"tasks": results}, curves


def recipe_theory(suite: Suite) -> tuple[dict, dict]:
    tc = suite.cfg["theory"]
    ref = tc["reference"]
    ref_b = theory.BoundInputs(ref["s"], ref["q"], ref["theta_n"], ref["delta"], ref["n"])
    report = {
        "reference": {**ref, "graft": theory.generalization_bound(ref_b).to_dict(), "retrain": theory.generalization_bound(ref_b, mode="retrain").to_dict()},
    }
    pre_train, pre_test = suite.pretrain_data("train"), suite.pretrain_data("test")
    report["pretrained_iid_gap"] = theory.train_test_gap(suite.pre, suite.pre_spec, pre_train, pre_test)
    tasks = {}
    for k in tc["shots"]:
        for t, name in enumerate(suite.names):
            pre, spec = suite.view(t)
            ft_gap, g_gap, bounds, eps1 = [], [], [], []
            regs = []
            for seed in _seeds(suite.cfg):
                train, test = suite.data(t, k, seed)
                ft, g = suite.ft(t, k, seed), suite.graft(t, k, seed)
                r = suite.region(t, k, seed)
                regs.append(r)
                ft_gap.append(theory.train_test_gap(ft, spec, train, test))
                g_gap.append(theory.train_test_gap(g, spec, train, test))
                e1 = theory.quantization_eps(g, spec, train, tc["quant_levels"])
                eps1.append(e1)
                b = theory.BoundInputs(max(len(r), 1), tc["q"], tc["theta_n"], tc["delta"], len(train))
                bounds.append(theory.generalization_bound(b, e1, 0.0).variance_bound)
            entry = {
                "task": name,
                "k": k,
                "ft_gap": _agg(ft_gap),
                "graft_gap": _agg(g_gap),
                "variance_bound": _agg(bounds),
                "quantization_eps": _agg(eps1),
            }
            if len(regs) >= 2:
                stab = theory.region_stability(regs)
                frac = suite.cfg["mask"]["sparsity_budget"] or regs[0].sparsity
                rand = theory.region_stability([gr.random_region(spec, frac, s) for s in _seeds(suite.cfg)])
                entry["stability"] = {
                    "learned_jaccard": stab.mean_pairwise_jaccard,
                    "learned_distinct": stab.distinct_count,
                    "random_jaccard": rand.mean_pairwise_jaccard,
                    "random_expected": theory.random_jaccard_expectation(frac),
                }
            tasks[f"{name}_k{k}"] = entry
    report["tasks"] = tasks
    return report, {}


def recipe_fisher(suite: Suite) -> tuple[dict, dict]:
    fc = suite.cfg["fisher"]
    k = fc["shots"]
    results = {}
    for t, name in enumerate(suite.names):
        pre, spec = suite.view(t)
        entry = {"task": name, "k": k, "fractions": []}
        for f in fc["fractions"]:
            ov_learned, ov_move, acc_f, acc_l = [], [], [], []
            for seed in _seeds(suite.cfg):
                train, test = suite.data(t, k, seed)
                ft = suite.ft(t, k, seed)
                learned = gr.project_sparsity(suite.logits(t, k, seed), f)
                fisher = gr.baseline_region("fisher", pre, spec, train, f, seed)
                move = gr.movement_region(pre, ft, f, spec)
                ov_learned.append(fisher.intersection_size(learned) / max(len(learned), 1))
                ov_move.append(fisher.intersection_size(move) / max(len(move), 1))
                acc_f.append(em.accuracy(gr.graft_compose(pre, ft, fisher), spec, test))
                acc_l.append(em.accuracy(gr.graft_compose(pre, ft, learned), spec, test))
            entry["fractions"].append(
                {
                    "fraction": f,
                    "overlap_with_learned": _agg(ov_learned),
                    "overlap_with_movement": _agg(ov_move),
                    "fisher_graft_acc": _agg(acc_f),
                    "learned_graft_acc": _agg(acc_l),
                }
            )
        results[name] = entry
    return {"tasks": results}, {}


RECIPE_FUNCS = {
    "tableone": recipe_tableone,
    "sweep": recipe_sweep,
    "retrain": recipe_retrain,
    "ood": recipe_ood,
    "adamreg": recipe_adamreg,
    "multitask": recipe_multitask,
    "continual": recipe_continual,
    "track": recipe_track,
    "theory": recipe_theory,
    "fisher": recipe_fisher,
}


def run(recipe: str, cfg: dict, out) -> Path:
    """Run one recipe and return the report path."""
    if recipe not in RECIPE_FUNCS:
        raise ConfigError(f"unknown recipe {recipe!r}")
    suite = Suite(cfg, Path(out))
    body, curves = RECIPE_FUNCS[recipe](suite)
    report = {"recipe": recipe, "config_hash": suite.hash, "seeds": _seeds(cfg), "results": body}
    path = Path(out) / "reports" / f"{recipe}.json"
    store.write_report(report, path, curves)
    suite.record_report(recipe, path)
    return path


# -- entry point -------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skillgraft", description="Skill-localization experiments on synthetic tasks.")
    p.add_argument("words", nargs="*", help="optional 'run <recipe>' or '<recipe>'")
    p.add_argument("--config", help="JSON config; keys not in the schema are rejected")
    p.add_argument("--recipe", choices=RECIPES)
    p.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
    p.add_argument("--seeds", help="comma-separated seed list instead of the config's list")
    p.add_argument("--out", help="output directory (created when missing)")
    p.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    return p


def _recipe_from(args) -> str | None:
    words = list(args.words)
    if words and words[0] == "run":
        words = words[1:]
    if len(words) > 1:
        raise ConfigError(f"unexpected arguments {' '.join(words[1:])!r}")
    positional = words[0] if words else None
    if positional is not None and args.recipe is not None and positional != args.recipe:
        raise ConfigError("recipe given twice with different values")
    return positional or args.recipe


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        overrides = {}
        recipe = _recipe_from(args)
        if recipe is not None:
            overrides["recipe"] = recipe
        if args.seed is not None and args.seeds is not None:
            raise ConfigError("--seed and --seeds are mutually exclusive")
        if args.seed is not None:
            overrides["seeds"] = [args.seed]
        if args.seeds is not None:
            try:
                overrides["seeds"] = [int(s) for s in args.seeds.split(",")]
            except ValueError as exc:
                raise ConfigError(f"bad --seeds value {args.seeds!r}") from exc
        if args.out is not None:
            overrides["out"] = args.out
        cfg = load_config(args.config, overrides)
        path = run(cfg["recipe"], cfg, cfg["out"])
        log.info("wrote %s", path)
        return 0
    except SkillGraftError as exc:
        log.error("error: %s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("i/o error: %s", exc)
        return StoreError.exit_code


if __name__ == "__main__":
    sys.exit(main())
