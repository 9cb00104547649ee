# borex/harness.py
"""
Experiment orchestration: run configuration, classifier construction,
method dispatch, per-item evaluation, paired signed-rank tests and the
report files.

Outputs of a run (all under the output directory):

    report.csv    item, method, insertion, deletion, f_measure, n_classifier_calls, wall_ms
    wilcoxon.csv  metric, baseline, comparison, n, W, p, method
    heatmap_<item>_<frame>.png            primary method
    heatmap_<item>_<method>_<frame>.png   every other method
    maps/<item>_<method>.bxt              saliency tensors
"""
from __future__ import annotations

import itertools
import json
import logging
import os
import threading
import time
import tomllib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

import config
from borex import gpr, mc_explainer
from borex.core import (
    ClassifierPort,
    DatasetItem,
    ImageVolume,
    Label,
    SaliencyVolume,
    dataset_load,
    evaluate_checked,
    write_tensor,
)
from borex.errors import BorexError, ConfigError, DegenerateSample, RunFailed
from borex.external import Command, ExternalClassifier
from borex.gpr import KernelParams, RefineConfig
from borex.heatmap import emit_heatmap
from borex.masking import MaskDistributionParams
from borex.mc_explainer import McConfig
from borex.metrics import evaluate_map, insertion, wilcoxon_signed_rank
from borex.synthetic import SyntheticClassifier

logger = logging.getLogger(__name__)

METRICS = ("insertion", "deletion", "f_measure")
LOWER_IS_BETTER = {"deletion"}
BASE_METHODS = ("rise", "pn_rise", "bo_baseline", "borex", "prior")
ABLATIONS = ("no_flip", "simple_avg", "no_prior")
SWEEP_KEYS = ("n_iters", "prior_masks")
REPORT_COLUMNS = ["item", "method", "insertion", "deletion", "f_measure", "n_classifier_calls", "wall_ms"]
WILCOXON_COLUMNS = ["metric", "baseline", "comparison", "n", "W", "p", "method"]


# ------------- Configuration ------------
@dataclass(frozen=True)
class ClassifierSpec:
    synthetic: Optional[str] = None
    external: Optional[Command] = None
    gamma: float = 1.0
    constant: float = 0.5
    timeout: float = config.CLASSIFIER_TIMEOUT
    labels: Tuple[str, ...] = ()

    def __post_init__(self):
        if (self.synthetic is None) == (self.external is None):
            raise ConfigError("classifier needs exactly one of 'synthetic' or 'external'")


@dataclass(frozen=True)
class RunConfig:
    classifier: ClassifierSpec
    seed: int
    dataset: str = ""
    method: str = "borex"
    baseline: Optional[str] = None
    refine: RefineConfig = field(default_factory=lambda: RefineConfig(n_iters=config.N_ITERS, sizes=config.SIZES,
                                                                      kappa=config.KAPPA))
    mc: McConfig = field(default_factory=lambda: McConfig(n_masks=config.PRIOR_MASKS))
    kernel: KernelParams = field(default_factory=lambda: KernelParams(nu=config.NU, length_scale=config.LENGTH_SCALE,
                                                                      noise_var=config.NOISE_VAR))
    steps: int = config.METRIC_STEPS
    fill: float = config.FILL
    output_dir: str = config.OUTPUT_DIR
    workers: int = config.WORKERS
    batch: int = config.BATCH
    record_wall_time: bool = False
    sweep: Dict[str, Tuple[int, ...]] = field(default_factory=dict)
    progress: bool = True
    prior_insertion_below: Optional[float] = None


_TOP_KEYS = {"dataset", "classifier", "method", "baseline", "seed", "output_dir", "steps", "fill", "workers",
             "batch", "record_wall_time", "progress", "refine", "mc", "kernel", "sweep", "prior_insertion_below"}
_CLASSIFIER_KEYS = {"synthetic", "external", "gamma", "constant", "timeout", "labels"}
_REFINE_KEYS = {"n_iters", "sizes", "spans", "kappa", "candidate_stride", "offset_quantile"}
_MC_KEYS = {"n_masks", "cell_grid", "keep_prob", "variant", "batch"}
_KERNEL_KEYS = {"nu", "length_scale", "signal_var", "noise_var", "frame_scale"}


def _section(doc: Dict[str, Any], name: str, allowed: set) -> Dict[str, Any]:
    sub = doc.get(name) or {}
    if not isinstance(sub, dict):
        raise ConfigError(f"[{name}] must be a table")
    unknown = set(sub) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    return sub


def _read_document(path: str) -> Dict[str, Any]:
    with open(path, "rb") as f:
        raw = f.read()
    try:
        if path.endswith(".toml"):
            return tomllib.loads(raw.decode("utf-8"))
        return json.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from e


def build_run_config(doc: Dict[str, Any], base_dir: str = ".", **overrides: Any) -> RunConfig:
    """Turn a parsed run document into a RunConfig; CLI overrides win over the document."""
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown key(s) in run config: {', '.join(sorted(unknown))}")
    doc = dict(doc)
    for key, value in overrides.items():
        if value is not None:
            doc[key] = value
    if doc.get("seed") is None:
        raise ConfigError("a seed is required (set 'seed' in the config or pass --seed)")
    seed = int(doc["seed"])
    if seed < 0:
        raise ConfigError(f"seed must be non-negative, got {seed}")

    try:
        cls = _section(doc, "classifier", _CLASSIFIER_KEYS)
        if not cls:
            raise ConfigError("run config needs a [classifier] table")
        classifier = ClassifierSpec(
            synthetic=cls.get("synthetic"),
            external=cls.get("external"),
            gamma=float(cls.get("gamma", 1.0)),
            constant=float(cls.get("constant", 0.5)),
            timeout=float(cls.get("timeout", config.CLASSIFIER_TIMEOUT)),
            labels=tuple(cls.get("labels", ())),
        )

        fill = float(doc.get("fill", config.FILL))
        r = _section(doc, "refine", _REFINE_KEYS)
        refine = RefineConfig(
            n_iters=int(r.get("n_iters", config.N_ITERS)),
            sizes=tuple(r.get("sizes", config.SIZES)),
            spans=tuple(r.get("spans", (1,))),
            kappa=float(r.get("kappa", config.KAPPA)),
            candidate_stride=r.get("candidate_stride"),
            offset_quantile=float(r.get("offset_quantile", 0.25)),
        )
        m = _section(doc, "mc", _MC_KEYS)
        grid = m.get("cell_grid", config.MC_GRID)
        grid = (int(grid), int(grid)) if isinstance(grid, (int, float)) else tuple(int(g) for g in grid)
        mc = McConfig(
            n_masks=int(m.get("n_masks", config.PRIOR_MASKS)),
            dist=MaskDistributionParams(cell_grid=grid, keep_prob=float(m.get("keep_prob", config.KEEP_PROB)),
                                        seed=seed),
            variant=m.get("variant", mc_explainer.RISE),
            batch=int(m.get("batch", config.BATCH)),
            fill=fill,
        )
        k = _section(doc, "kernel", _KERNEL_KEYS)
        kernel = KernelParams(
            nu=float(k.get("nu", config.NU)),
            length_scale=float(k.get("length_scale", config.LENGTH_SCALE)),
            signal_var=float(k.get("signal_var", 1.0)),
            noise_var=float(k.get("noise_var", config.NOISE_VAR)),
            frame_scale=float(k.get("frame_scale", 1.0)),
        )
        sweep = _section(doc, "sweep", set(SWEEP_KEYS))
        if len(sweep) > 1:
            raise ConfigError("sweep one parameter at a time")

        dataset = doc.get("dataset", "")
        if dataset and not os.path.isabs(dataset):
            dataset = os.path.join(base_dir, dataset)
        cfg = RunConfig(
            classifier=classifier,
            seed=seed,
            dataset=dataset,
            method=str(doc.get("method", "borex")),
            baseline=doc.get("baseline"),
            refine=refine,
            mc=mc,
            kernel=kernel,
            steps=int(doc.get("steps", config.METRIC_STEPS)),
            fill=fill,
            output_dir=str(doc.get("output_dir", config.OUTPUT_DIR)),
            workers=int(doc.get("workers", config.WORKERS)),
            batch=int(doc.get("batch", config.BATCH)),
            record_wall_time=bool(doc.get("record_wall_time", False)),
            sweep={key: tuple(int(v) for v in values) for key, values in sweep.items()},
            progress=bool(doc.get("progress", True)),
            prior_insertion_below=(
                float(doc["prior_insertion_below"]) if doc.get("prior_insertion_below") is not None else None
            ),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    plan_methods(cfg)
    return cfg


def load_run_config(path: str, **overrides: Any) -> RunConfig:
    doc = _read_document(path)
    return build_run_config(doc, base_dir=os.path.dirname(os.path.abspath(path)), **overrides)


# ------------- Methods ------------------
@dataclass(frozen=True)
class MethodSpec:
    name: str
    kind: str  # rise | pn_rise | prior | refine
    variant: str = "borex"
    n_iters: Optional[int] = None
    prior_masks: Optional[int] = None


def method_spec(name: str) -> MethodSpec:
    if name in ("rise", "pn_rise", "prior"):
        return MethodSpec(name, name)
    if name in ("borex", "bo_baseline"):
        return MethodSpec(name, "refine", variant=name)
    if name.startswith("ablation:") and name.split(":", 1)[1] in ABLATIONS:
        return MethodSpec(name, "refine", variant=name.split(":", 1)[1])
    raise ConfigError(
        f"unknown method {name!r}; expected one of {BASE_METHODS} or ablation:<{'|'.join(ABLATIONS)}>"
    )


def plan_methods(cfg: RunConfig) -> Tuple[List[MethodSpec], List[Tuple[str, str]]]:
    """Methods to run per item and the (baseline, comparison) pairs to test."""
    primary = method_spec(cfg.method)
    if cfg.sweep:
        if primary.kind != "refine":
            raise ConfigError("sweeps apply to refinement methods only")
        key, values = next(iter(cfg.sweep.items()))
        methods = [replace(primary, name=f"{cfg.method}[{key}={v}]", **{key: v}) for v in sorted(set(values))]
        pairs = [(a.name, b.name) for a, b in itertools.combinations(methods, 2)]
        return methods, pairs
    methods = [primary]
    pairs: List[Tuple[str, str]] = []
    if cfg.baseline:
        base = method_spec(cfg.baseline)
        if base.name == primary.name:
            raise ConfigError("baseline and method must differ")
        methods.append(base)
        pairs.append((base.name, primary.name))
    return methods, pairs


# ------------- Classifiers --------------
class CountingClassifier:
    """Wraps a classifier and counts evaluated volumes."""

    def __init__(self, inner: ClassifierPort):
        self.inner = inner
        self.calls = 0

    @property
    def label_set(self):
        return self.inner.label_set

    @property
    def serial(self) -> bool:
        return self.inner.serial

    def evaluate(self, volumes: Sequence[ImageVolume], label: Label) -> np.ndarray:
        self.calls += len(volumes)
        return self.inner.evaluate(volumes, label)


class ClassifierPool:
    """Hands out a classifier per item; external processes are kept one per worker thread."""

    def __init__(self, spec: ClassifierSpec, fill: float = 0.0):
        self.spec = spec
        self.fill = fill
        self._registry: Dict[int, ExternalClassifier] = {}
        self._lock = threading.Lock()

    def for_item(self, item: DatasetItem) -> ClassifierPort:
        if self.spec.synthetic is not None:
            return SyntheticClassifier.for_item(
                self.spec.synthetic, item, gamma=self.spec.gamma, constant=self.spec.constant, fill=self.fill
            )
        worker = threading.get_ident()
        with self._lock:
            if worker not in self._registry:
                self._registry[worker] = ExternalClassifier(
                    self.spec.external, labels=self.spec.labels, timeout=self.spec.timeout
                ).start()
            return self._registry[worker]

    def discard(self) -> None:
        """Drop the calling worker's process; the next item starts a fresh one."""
        with self._lock:
            classifier = self._registry.pop(threading.get_ident(), None)
        if classifier is not None:
            classifier.close()

    def close(self) -> None:
        with self._lock:
            for classifier in self._registry.values():
                classifier.close()
            self._registry.clear()


# ------------- Per-item work ------------
@dataclass
class ItemResult:
    item: str
    method: str
    insertion: float
    deletion: float
    f_measure: float
    n_classifier_calls: int
    wall_ms: int


@dataclass
class WilcoxonRow:
    metric: str
    baseline: str
    comparison: str
    n: int
    W: float
    p: float
    method: str


@dataclass
class EvalReport:
    rows: List[ItemResult] = field(default_factory=list)
    wilcoxon: List[WilcoxonRow] = field(default_factory=list)
    failures: List[Tuple[str, str]] = field(default_factory=list)
    prior_insertion: Dict[str, float] = field(default_factory=dict)
    maps: Dict[Tuple[str, str], SaliencyVolume] = field(default_factory=dict, repr=False)

    def report_frame(self) -> pd.DataFrame:
        df = pd.DataFrame([vars(r) for r in self.rows], columns=REPORT_COLUMNS)
        if df.empty:
            return df
        summary = df.groupby("method", sort=False)[REPORT_COLUMNS[2:]].mean().reset_index()
        summary.insert(0, "item", "mean")
        return pd.concat([df, summary[REPORT_COLUMNS]], ignore_index=True)

    def wilcoxon_frame(self) -> pd.DataFrame:
        return pd.DataFrame([vars(w) for w in self.wilcoxon], columns=WILCOXON_COLUMNS)


class ItemRunner:
    """Explains and scores one dataset item with every planned method."""

    def __init__(self, cfg: RunConfig, item: DatasetItem, index: int, classifier: ClassifierPort):
        self.cfg = cfg
        self.item = item
        self.seed = cfg.seed ^ index
        self.classifier = CountingClassifier(classifier)
        self._priors: Dict[int, Tuple[SaliencyVolume, int]] = {}

    def prior(self, masks: Optional[int] = None) -> Tuple[SaliencyVolume, int]:
        """The item's prior file, or a Monte-Carlo prior with `masks` masks (cached)."""
        if self.item.prior is not None and masks is None:
            return self.item.prior, 0
        n_masks = masks if masks is not None else self.cfg.mc.n_masks
        if n_masks not in self._priors:
            start = self.classifier.calls
            mc = replace(self.cfg.mc, n_masks=n_masks)
            rng = np.random.default_rng([self.seed, n_masks])
            smap = mc_explainer.estimate(self.classifier, self.item.image, self.item.target, mc, rng)
            self._priors[n_masks] = (smap, self.classifier.calls - start)
        return self._priors[n_masks]

    def explain(self, method: MethodSpec) -> Tuple[SaliencyVolume, int]:
        item, cfg = self.item, self.cfg
        if method.kind in mc_explainer.VARIANTS:
            start = self.classifier.calls
            mc = replace(cfg.mc, variant=method.kind)
            smap = mc_explainer.estimate(self.classifier, item.image, item.target, mc, np.random.default_rng(self.seed))
            return smap, self.classifier.calls - start
        if method.kind == "prior":
            return self.prior()

        rcfg = cfg.refine.with_variant(method.variant)
        if method.n_iters is not None:
            rcfg = replace(rcfg, n_iters=method.n_iters)
        prior, prior_calls = None, 0
        if method.prior_masks == 0:
            rcfg = replace(rcfg, use_prior=False)
        elif rcfg.use_prior:
            prior, prior_calls = self.prior(method.prior_masks)
        start = self.classifier.calls
        smap = gpr.refine(self.classifier, item.image, prior, item.target, rcfg, cfg.kernel, cfg.fill)
        return smap, self.classifier.calls - start + prior_calls

    def run(self, methods: Sequence[MethodSpec]) -> List[Tuple[ItemResult, SaliencyVolume]]:
        out = []
        for method in methods:
            t0 = time.perf_counter()
            smap, calls = self.explain(method)
            elapsed = int(round((time.perf_counter() - t0) * 1000))
            scores = evaluate_map(self.classifier.inner, self.item.image, self.item.target, smap, self.item.region,
                                  self.cfg.steps, self.cfg.fill, self.cfg.batch)
            logger.info("Explained %s with %s in %d ms (%d classifier calls)", self.item.id, method.name, elapsed, calls)
            result = ItemResult(
                item=self.item.id,
                method=method.name,
                insertion=scores["insertion"],
                deletion=scores["deletion"],
                f_measure=scores["f_measure"],
                n_classifier_calls=calls,
                wall_ms=elapsed if self.cfg.record_wall_time else 0,
            )
            out.append((result, smap))
        return out

    def prior_insertion(self, results: Sequence[Tuple[ItemResult, SaliencyVolume]]) -> float:
        """Insertion score of the item's prior map, reusing the "prior" row when there is one."""
        for result, _ in results:
            if result.method == "prior":
                return result.insertion
        smap, _ = self.prior()
        return insertion(self.classifier.inner, self.item.image, self.item.target, smap, self.cfg.steps,
                         self.cfg.fill, self.cfg.batch).score


# ------------- Paired tests -------------
def paired_tests(
    rows: Sequence[ItemResult],
    pairs: Sequence[Tuple[str, str]],
    only: Optional[set] = None,
    tag: str = "",
) -> List[WilcoxonRow]:
    """One row per (pair, metric). `only` restricts the items; `tag` is appended to the comparison name."""
    by_key = {(r.item, r.method): r for r in rows}
    items = [i for i in dict.fromkeys(r.item for r in rows) if only is None or i in only]
    out = []
    for baseline, comparison in pairs:
        for metric in METRICS:
            samples = []
            for item in items:
                a, b = by_key.get((item, comparison)), by_key.get((item, baseline))
                if a is None or b is None:
                    continue
                va, vb = getattr(a, metric), getattr(b, metric)
                if np.isfinite(va) and np.isfinite(vb):
                    samples.append((va, vb))
            alternative = "less" if metric in LOWER_IS_BETTER else "greater"
            try:
                res = wilcoxon_signed_rank(samples, alternative=alternative)
                out.append(WilcoxonRow(metric, baseline, comparison + tag, res.n_effective, res.statistic, res.p_value,
                                       res.method))
            except DegenerateSample:
                logger.warning("No informative pairs for %s: %s vs %s", metric, comparison, baseline)
                out.append(WilcoxonRow(metric, baseline, comparison + tag, 0, 0.0, 1.0, "degenerate"))
    return out


# ------------- Run ----------------------
def _slug(s: str) -> str:
    return "".join(c if c.isalnum() or c in ("-", "_", ".") else "_" for c in s)


def write_outputs(report: EvalReport, cfg: RunConfig, items: Sequence[DatasetItem], methods: Sequence[MethodSpec],
                  pairs: Sequence[Tuple[str, str]]) -> None:
    out_dir = cfg.output_dir
    maps_dir = os.path.join(out_dir, "maps")
    os.makedirs(maps_dir, exist_ok=True)
    primary = methods[0].name
    for item in items:
        for method in methods:
            smap = report.maps.get((item.id, method.name))
            if smap is None:
                continue
            stem = f"heatmap_{item.id}" if method.name == primary else f"heatmap_{item.id}_{_slug(method.name)}"
            emit_heatmap(smap, item.image, out_dir, stem)
            write_tensor(os.path.join(maps_dir, f"{item.id}_{_slug(method.name)}.bxt"), smap.values)
    report.report_frame().to_csv(os.path.join(out_dir, "report.csv"), index=False, float_format="%.10g")
    if pairs:
        report.wilcoxon_frame().to_csv(os.path.join(out_dir, "wilcoxon.csv"), index=False, float_format="%.10g")
    logger.info("Wrote report for %d row(s) to %s", len(report.rows), out_dir)


def run_experiment(cfg: RunConfig, write: bool = True) -> EvalReport:
    if not cfg.dataset:
        raise ConfigError("run config needs a dataset")
    items = dataset_load(cfg.dataset)
    methods, pairs = plan_methods(cfg)
    pool = ClassifierPool(cfg.classifier, cfg.fill)
    report = EvalReport()
    outcomes: List[Optional[List[Tuple[ItemResult, SaliencyVolume]]]] = [None] * len(items)
    prior_scores: List[Optional[float]] = [None] * len(items)

    def work(index: int) -> None:
        item = items[index]
        try:
            runner = ItemRunner(cfg, item, index, pool.for_item(item))
            results = runner.run(methods)
            if cfg.prior_insertion_below is not None:
                prior_scores[index] = runner.prior_insertion(results)
            outcomes[index] = results
        except (BorexError, ValueError, OSError) as e:
            logger.warning("Item %s failed: %s", item.id, e)
            report.failures.append((item.id, str(e)))
            pool.discard()

    progress = tqdm(total=len(items), desc="items", disable=not cfg.progress)
    try:
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
                for _ in executor.map(work, range(len(items))):
                    progress.update(1)
        else:
            for index in range(len(items)):
                work(index)
                progress.update(1)
    finally:
        progress.close()
        pool.close()

    report.failures.sort()
    if items and 2 * len(report.failures) > len(items):
        raise RunFailed(f"{len(report.failures)} of {len(items)} items failed", report.failures)
    for outcome in outcomes:
        for result, smap in outcome or ():
            report.rows.append(result)
            report.maps[(result.item, result.method)] = smap
    report.wilcoxon = paired_tests(report.rows, pairs)
    if cfg.prior_insertion_below is not None:
        threshold = cfg.prior_insertion_below
        report.prior_insertion = {
            item.id: score for item, score, outcome in zip(items, prior_scores, outcomes)
            if outcome is not None and score is not None
        }
        weak = {item_id for item_id, score in report.prior_insertion.items() if score < threshold}
        logger.info("%d of %d item(s) have a prior with insertion below %g", len(weak), len(report.prior_insertion),
                    threshold)
        report.wilcoxon += paired_tests(report.rows, pairs, only=weak, tag=f"[prior_insertion<{threshold:g}]")
    if write:
        write_outputs(report, cfg, items, methods, pairs)
    return report


# ------------- Single images ------------
def explain_one(cfg: RunConfig, item: DatasetItem) -> Tuple[SaliencyVolume, int]:
    """Explain one item with cfg.method; returns the map and the classifier calls spent."""
    pool = ClassifierPool(cfg.classifier, cfg.fill)
    try:
        runner = ItemRunner(cfg, item, 0, pool.for_item(item))
        return runner.explain(method_spec(cfg.method))
    finally:
        pool.close()


def evaluate_one(cfg: RunConfig, item: DatasetItem, smap: SaliencyVolume) -> Dict[str, float]:
    pool = ClassifierPool(cfg.classifier, cfg.fill)
    try:
        classifier = pool.for_item(item)
        scores = evaluate_map(classifier, item.image, item.target, smap, item.region, cfg.steps, cfg.fill, cfg.batch)
        scores["confidence"] = float(evaluate_checked(classifier, [item.image], item.target)[0])
        return scores
    finally:
        pool.close()
