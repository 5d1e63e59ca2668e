"""Parameter and FLOP accounting for shallow prompts, deep prompts and APT.

Counts are closed forms over a :class:`CostSpec`.  Every term is kept as a
raw operation tally (MACs, exps, divs, cmps, adds) so the same report can be
priced under different conventions; :data:`DEFAULT` charges 2 FLOPs per MAC
and 1 per other op, which is also what :class:`aptkit.numkit.FlopCounter`
reports.  ``measured_vs_analytic`` runs the instrumented forwards and checks
that the two agree.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from . import numkit as nk
from .apt import AptParams, apt_attention, apt_delta
from .attention import (
    AttentionParams,
    FeedForward,
    Layer,
    PromptBank,
    deep_prompt_forward,
    input_row_attention,
    plain_forward,
    prompt_extended_attention,
    self_attention,
    shallow_prompt_forward,
)

OPS = ("macs", "exps", "divs", "cmps", "adds")
VARIANTS = ("deep_skip", "deep_full", "shallow")
# cmp, 2 adds (shift and sum), exp and div per softmax entry
SOFTMAX_PER_ENTRY = {"cmps": 1, "adds": 2, "exps": 1, "divs": 1}


class CostError(ValueError):
    pass


@dataclass(frozen=True)
class Convention:
    name: str = "default"
    flops_per_mac: float = 2.0
    count_nonlinear: bool = True

    def price(self, term: "Term") -> float:
        total = self.flops_per_mac * term.macs
        if self.count_nonlinear:
            total += term.exps + term.divs + term.cmps + term.adds
        return total


DEFAULT = Convention()
# MAC-only tally: the unit in which the reference tables are consistent
MAC_ONLY = Convention(name="mac-only", flops_per_mac=1.0, count_nonlinear=False)
CONVENTIONS = {c.name: c for c in (DEFAULT, MAC_ONLY)}


@dataclass(frozen=True)
class CostSpec:
    name: str
    layers: int
    d: int
    n: float
    p: int
    r: int
    sites: int
    ffn_mult: int = 4
    heads: int = 1
    streams: int = 1
    attn_per_layer: int = 1
    project_prompt_queries: bool = False

    def __post_init__(self):
        for f in ("layers", "d", "ffn_mult", "heads", "streams", "attn_per_layer"):
            if getattr(self, f) < 1:
                raise CostError(f"{f} must be positive, got {getattr(self, f)}")
        for f in ("p", "r", "sites"):
            if getattr(self, f) < 0:
                raise CostError(f"{f} must be non-negative, got {getattr(self, f)}")
        if self.n < 0:
            raise CostError(f"n must be non-negative, got {self.n}")
        if self.r > self.d:
            raise CostError(f"rank r={self.r} exceeds d={self.d}")
        if self.d % self.heads:
            raise CostError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.sites > self.total_sites:
            raise CostError(f"sites={self.sites} exceeds the {self.total_sites} attention sites available")

    @property
    def total_sites(self) -> int:
        return self.layers * self.streams * self.attn_per_layer

    def with_(self, **changes) -> CostSpec:
        return replace(self, **changes)


@dataclass(frozen=True)
class Term:
    name: str
    macs: float = 0
    exps: float = 0
    divs: float = 0
    cmps: float = 0
    adds: float = 0

    def scaled(self, k: float) -> Term:
        return Term(self.name, *(getattr(self, op) * k for op in OPS))

    def __add__(self, other: Term) -> Term:
        return Term(self.name, *(getattr(self, op) + getattr(other, op) for op in OPS))


@dataclass
class CostReport:
    spec: CostSpec
    method: str
    param_terms: dict[str, int]
    site_terms: list[Term]
    multiplier: int
    convention: Convention = DEFAULT
    notes: list[str] = field(default_factory=list)

    @property
    def added_params(self) -> int:
        return sum(self.param_terms.values())

    @property
    def terms(self) -> list[Term]:
        """Whole-model terms (per-site terms times the number of sites)."""
        return [t.scaled(self.multiplier) for t in self.site_terms]

    def flops_by_term(self, convention: Convention | None = None) -> dict[str, float]:
        conv = convention or self.convention
        return {t.name: conv.price(t) for t in self.terms}

    def added_flops(self, convention: Convention | None = None) -> float:
        return float(sum(self.flops_by_term(convention).values()))

    def ops(self) -> dict[str, float]:
        return {op: sum(getattr(t, op) for t in self.terms) for op in OPS}

    def priced(self, convention: Convention) -> CostReport:
        return replace(self, convention=convention)


def _softmax_entries(name: str, entries: float) -> Term:
    return Term(name, **{k: v * entries for k, v in SOFTMAX_PER_ENTRY.items()})


def params_deep_prompt(spec: CostSpec) -> int:
    return spec.sites * spec.p * spec.d


def params_shallow_prompt(spec: CostSpec) -> int:
    """One prompt matrix per input stream (two-stream hosts carry two)."""
    return spec.streams * spec.p * spec.d


def params_apt(spec: CostSpec) -> int:
    """Prompts, both low-rank factors and the scale, per site; nothing when p=0."""
    if spec.p == 0:
        return 0
    return spec.sites * (spec.p * spec.d + 2 * spec.d * spec.r + 1)


def _deep_skip_site(s: CostSpec) -> list[Term]:
    n, p, d = s.n, s.p, s.d
    proj = (3 if s.project_prompt_queries else 2) * p * d * d
    return [
        Term("projection", macs=proj),
        Term("score", macs=n * p * d),
        _softmax_entries("softmax", s.heads * n * p),
        Term("weighting", macs=n * p * d),
    ]


def _deep_full_site(s: CostSpec) -> list[Term]:
    """Skip path plus the prompt output rows that are computed then dropped."""
    n, p, d = s.n, s.p, s.d
    # prompt queries (unless already projected) and the W_o pass on prompt rows
    extra_proj = (1 if s.project_prompt_queries else 2) * p * d * d
    extra = [
        Term("projection", macs=extra_proj),
        Term("score", macs=p * (n + p) * d),
        _softmax_entries("softmax", s.heads * p * (n + p)),
        Term("weighting", macs=p * (n + p) * d),
    ]
    return [a + b for a, b in zip(_deep_skip_site(s), extra)]


def _shallow_layer(s: CostSpec) -> list[Term]:
    """Extra work in one layer (one stream) when p prompt rows ride along."""
    n, p, d = s.n, s.p, s.d
    entries = 2 * n * p + p * p  # (n+p)^2 - n^2
    k = s.attn_per_layer
    return [
        Term("projection", macs=k * 4 * p * d * d),
        Term("score", macs=k * entries * d),
        _softmax_entries("softmax", k * s.heads * entries),
        Term("weighting", macs=k * entries * d),
        Term("ffn", macs=2 * s.ffn_mult * p * d * d, cmps=s.ffn_mult * p * d),
        Term("residual", adds=(k + 1) * p * d),
    ]


def flops_prompt_attention(spec: CostSpec, variant: str) -> CostReport:
    if variant == "deep_skip":
        return CostReport(spec, "deep", {"prompts": params_deep_prompt(spec)}, _deep_skip_site(spec), spec.sites)
    if variant == "deep_full":
        return CostReport(spec, "deep_full", {"prompts": params_deep_prompt(spec)}, _deep_full_site(spec), spec.sites)
    if variant == "shallow":
        return CostReport(
            spec,
            "shallow",
            {"prompts": params_shallow_prompt(spec)},
            _shallow_layer(spec),
            spec.layers * spec.streams,
        )
    raise CostError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")


def _apt_site(s: CostSpec, merge: bool = True) -> list[Term]:
    n, p, d, r = s.n, s.p, s.d, s.r
    if p == 0:
        # no prompts: the module is absent altogether
        return []
    terms = [
        Term("low_rank", macs=2 * p * d * r, adds=p * d),
        Term("score", macs=n * p * d),
        Term("activation", cmps=n * p + p * d),
        Term("weighting", macs=n * p * d + n * d),
    ]
    if merge:
        terms.append(Term("merge", macs=n * d, adds=n * d, exps=1))
    return terms


def flops_apt(spec: CostSpec, merge: bool = True) -> CostReport:
    """APT cost; ``merge=False`` leaves out the ``(SA + delta) * e^s`` step."""
    params = {
        "prompts": spec.sites * spec.p * spec.d,
        "low_rank": spec.sites * 2 * spec.d * spec.r,
        "scale": spec.sites,
    }
    if spec.p == 0:
        params = {k: 0 for k in params}
    return CostReport(spec, "apt", params, _apt_site(spec, merge=merge), spec.sites)


def saving(spec: CostSpec, convention: Convention = DEFAULT) -> float:
    """Fraction of deep-prompt (skip) FLOPs that APT avoids."""
    deep = flops_prompt_attention(spec, "deep_skip").added_flops(convention)
    if deep == 0:
        return 0.0
    return 1.0 - flops_apt(spec).added_flops(convention) / deep


@dataclass
class FitResult:
    spec: CostSpec
    n: float
    target: float
    achieved: float
    convention: Convention

    @property
    def residual(self) -> float:
        return (self.achieved - self.target) / self.target


def flops_fit(
    spec: CostSpec, target: float, convention: Convention = MAC_ONLY, variant: str = "deep_skip"
) -> FitResult:
    """Solve for the sequence length that makes ``variant`` cost ``target`` FLOPs."""
    if not target > 0:
        raise CostError(f"target must be positive, got {target}")

    def f(n: float) -> float:
        return flops_prompt_attention(spec.with_(n=n), variant).added_flops(convention) - target

    if f(0.0) >= 0:
        raise CostError(
            f"no positive solution: {spec.name} already costs {f(0.0) + target:.4g} at n=0, "
            f"target {target:.4g} ({convention.name} convention)"
        )
    hi = max(1.0, float(spec.n))
    while f(hi) < 0:
        hi *= 2
        if hi > 1e15:
            raise CostError("no positive solution: cost does not grow with n")
    n = brentq(f, 0.0, hi, xtol=1e-9, rtol=1e-14)
    fitted = spec.with_(n=n)
    achieved = flops_prompt_attention(fitted, variant).added_flops(convention)
    return FitResult(fitted, n, target, achieved, convention)


# --- presets and reference figures -------------------------------------------

PRESETS: dict[str, CostSpec] = {
    "vilt": CostSpec("vilt", layers=12, d=768, n=240, p=200, r=4, sites=12, heads=12, project_prompt_queries=True),
    # six fusion layers per stream, each with self- and cross-attention
    "meter-self": CostSpec(
        "meter-self", layers=6, d=768, n=570, p=200, r=4, sites=12, heads=12,
        streams=2, attn_per_layer=2, project_prompt_queries=True,
    ),
    "meter-both": CostSpec(
        "meter-both", layers=6, d=768, n=570, p=200, r=4, sites=24, heads=12,
        streams=2, attn_per_layer=2, project_prompt_queries=True,
    ),
    "clip-text": CostSpec("clip-text", layers=12, d=512, n=77, p=4, r=2, sites=12, heads=8),
}

M, G = 1e6, 1e9
# published parameter and FLOP figures per preset; "deep" FLOPs are the fit target
REFERENCE: dict[str, dict] = {
    "vilt": {
        "params": {"deep": 1.84 * M, "shallow": 0.15 * M, "apt": 1.92 * M},
        "flops": {"deep": 5.14 * G, "shallow": 19.53 * G, "apt": 0.91 * G},
        "saving": (82.30,),
    },
    "meter-self": {
        "params": {"deep": 1.84 * M, "shallow": 0.30 * M},
        "flops": {"deep": 6.35 * G, "shallow": 28.71 * G, "apt": 2.31 * G},
        "saving": (62.62, 63.62),
    },
    "meter-both": {
        "params": {"deep": 3.68 * M, "shallow": 0.30 * M, "apt": 3.83 * M},
        "flops": {"deep": 13.05 * G, "shallow": 28.71 * G, "apt": 2.31 * G},
        "saving": (62.62, 63.62),
    },
}
# cross-attention deep prompting appears only as a reference figure
EXTRA_REFERENCE_FLOPS = {"meter deep (cross)": 6.53 * G}

PARAM_DECIMALS = 2  # reference parameters are quoted to 0.01M
SAVING_BAND = 5.0  # percentage points


def preset(name: str, fitted: bool = True) -> CostSpec:
    """A preset spec, with ``n`` fitted to its reference deep-prompt FLOPs if any."""
    try:
        spec = PRESETS[name]
    except KeyError:
        raise CostError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
    if fitted and name in REFERENCE:
        return flops_fit(spec, REFERENCE[name]["flops"]["deep"]).spec
    return spec


def method_reports(spec: CostSpec) -> dict[str, CostReport]:
    return {
        "shallow": flops_prompt_attention(spec, "shallow"),
        "deep": flops_prompt_attention(spec, "deep_skip"),
        "apt": flops_apt(spec),
    }


@dataclass
class Check:
    name: str
    value: float
    expected: str
    passed: bool

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.value:.6g} (expected {self.expected})"


def param_checks(name: str) -> list[Check]:
    spec = PRESETS[name]
    values = {"deep": params_deep_prompt(spec), "shallow": params_shallow_prompt(spec), "apt": params_apt(spec)}
    out = []
    for method, ref in REFERENCE.get(name, {}).get("params", {}).items():
        out.append(
            Check(f"{name} {method} params (M)", values[method] / M, f"{ref / M:.2f}M", quoted_match(values[method], ref))
        )
    return out


def quoted_match(exact: int, quoted: float, unit: float = M, decimals: int = PARAM_DECIMALS) -> bool:
    """Whether ``quoted`` is a 2-decimal rendering of ``exact``, rounded or truncated.

    The reference tables mix both: 1,916,940 is quoted as 1.92M while
    3,686,400 appears as 3.68M.
    """
    k = 10**decimals
    x = exact / unit
    target = round(quoted / unit * k)
    return round(x * k) == target or math.floor(x * k) == target


def saving_checks(name: str) -> tuple[list[Check], FitResult]:
    ref = REFERENCE[name]
    fit = flops_fit(PRESETS[name], ref["flops"]["deep"])
    pct = 100 * saving(fit.spec, DEFAULT)
    ok = any(abs(pct - s) <= SAVING_BAND for s in ref["saving"])
    expected = " or ".join(f"{s:.2f}" for s in ref["saving"]) + f" +/- {SAVING_BAND:g}"
    checks = [
        Check(f"{name} fitted n", fit.n, "> 0", fit.n > 0),
        Check(f"{name} APT saving vs deep (%)", pct, expected, ok),
    ]
    return checks, fit


def check_reference(names=("vilt", "meter-self", "meter-both")) -> list[Check]:
    out = []
    for name in names:
        out.extend(param_checks(name))
        if name in REFERENCE:
            out.extend(saving_checks(name)[0])
    return out


# --- tables ------------------------------------------------------------------

TERM_ORDER = ("projection", "score", "softmax", "weighting", "low_rank", "activation", "merge", "ffn", "residual")


def cost_rows(spec: CostSpec, convention: Convention = DEFAULT) -> list[dict]:
    rows = []
    for method, rep in method_reports(spec).items():
        by_term = rep.flops_by_term(convention)
        row = {
            "method": method,
            "Updated Parameter": rep.added_params,
            "Additional FLOPs": rep.added_flops(convention),
        }
        for t in TERM_ORDER:
            row[t] = by_term.get(t, 0.0)
        rows.append(row)
    return rows


def _human(x: float, unit: str) -> str:
    scale = {"M": M, "G": G}[unit]
    return f"{x / scale:.2f}{unit}"


def table_csv(spec: CostSpec, convention: Convention = DEFAULT) -> str:
    rows = cost_rows(spec, convention)
    out = io.StringIO()
    w = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
    return out.getvalue()


def table_markdown(spec: CostSpec, convention: Convention = DEFAULT) -> str:
    rows = cost_rows(spec, convention)
    terms = [t for t in TERM_ORDER if any(r[t] for r in rows)]
    head = ["Method", "Updated Parameter", "Additional FLOPs", *terms]
    lines = [
        f"**{spec.name}** (L={spec.layers}, d={spec.d}, n={spec.n:.1f}, p={spec.p}, r={spec.r}, "
        f"sites={spec.sites}; {convention.name} convention)",
        "",
        "| " + " | ".join(head) + " |",
        "|" + "---|" * len(head),
    ]
    for r in rows:
        cells = [r["method"], _human(r["Updated Parameter"], "M"), _human(r["Additional FLOPs"], "G")]
        cells += [_human(r[t], "G") for t in terms]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def reference_comparison(name: str) -> list[dict]:
    """Fitted-configuration FLOPs next to the published figures (reported only)."""
    ref = REFERENCE[name]
    fit = flops_fit(PRESETS[name], ref["flops"]["deep"])
    reps = method_reports(fit.spec)
    rows = []
    for method, published in ref["flops"].items():
        rows.append(
            {
                "preset": name,
                "method": method,
                "fitted_n": fit.n,
                "published": published,
                "mac_only": reps[method].added_flops(MAC_ONLY),
                "default": reps[method].added_flops(DEFAULT),
            }
        )
    return rows


# --- instrumented check ------------------------------------------------------

EXECUTABLE_LIMIT = 10**7


@dataclass
class MeasureRow:
    name: str
    counted: dict[str, float]
    analytic: dict[str, float]

    @property
    def counted_flops(self) -> float:
        return DEFAULT.price(Term("x", **self.counted))

    @property
    def analytic_flops(self) -> float:
        return DEFAULT.price(Term("x", **self.analytic))

    @property
    def rel_err(self) -> float:
        a, c = self.analytic_flops, self.counted_flops
        if a == c:
            return 0.0
        return abs(a - c) / max(abs(a), abs(c))


@dataclass
class MeasureReport:
    spec: CostSpec
    rows: list[MeasureRow]
    tol: float = 0.01

    @property
    def passed(self) -> bool:
        return all(r.rel_err <= self.tol for r in self.rows)

    def row(self, name: str) -> MeasureRow:
        return next(r for r in self.rows if r.name == name)


def _counted(fn) -> dict[str, float]:
    with nk.count_flops() as c:
        fn()
    return {op: float(getattr(c, op)) for op in OPS}


def _diff(a: dict, b: dict) -> dict:
    return {op: a[op] - b[op] for op in OPS}


def measured_vs_analytic(spec: CostSpec, seed: int = 0, tol: float = 0.01) -> MeasureReport:
    """Run counted forwards on random weights and compare with the closed forms.

    Each row is the extra work over the same forward without prompts.  The
    whole-model deep and APT rows use a stack of ``spec.sites`` layers; the
    shallow row uses ``spec.layers`` single-stream layers.
    """
    n = int(spec.n)
    if n != spec.n or n < 1:
        raise CostError(f"executable specs need a positive integer n, got {spec.n}")
    if n * spec.p * spec.d > EXECUTABLE_LIMIT:
        raise CostError(f"spec too large to execute (n*p*d = {n * spec.p * spec.d} > {EXECUTABLE_LIMIT})")
    rng = np.random.default_rng(seed)
    d = spec.d
    x = rng.normal(size=(n, d))
    att = AttentionParams.random(d, rng, heads=spec.heads)
    prompts = rng.normal(size=(spec.p, d))
    base = _counted(lambda: self_attention(x, att))

    rows = []
    skip = _counted(lambda: input_row_attention(x, prompts, att, spec.project_prompt_queries))
    rows.append(MeasureRow("deep_skip site", _diff(skip, base), flops_prompt_attention(spec.with_(sites=1), "deep_skip").ops()))
    full = _counted(lambda: prompt_extended_attention(x, prompts, att))
    rows.append(MeasureRow("deep_full site", _diff(full, base), flops_prompt_attention(spec.with_(sites=1), "deep_full").ops()))

    if spec.p:
        apt = AptParams(
            rng.normal(size=(spec.p, d)), rng.normal(size=(d, spec.r)), rng.normal(size=(spec.r, d)), 0.1
        )
        delta = _counted(lambda: apt_delta(x, apt))
        rows.append(MeasureRow("apt delta site", delta, flops_apt(spec.with_(sites=1), merge=False).ops()))
        merged = _counted(lambda: apt_attention(x, att, apt))
        rows.append(MeasureRow("apt site", _diff(merged, base), flops_apt(spec.with_(sites=1)).ops()))
    else:
        zero = {op: 0.0 for op in OPS}
        rows.append(MeasureRow("apt site", zero, flops_apt(spec.with_(sites=1)).ops()))

    if spec.sites:
        stack = [Layer(AttentionParams.random(d, rng, heads=spec.heads), FeedForward.random(d, rng, spec.ffn_mult)) for _ in range(spec.sites)]
        bank = PromptBank("deep", [rng.normal(size=(spec.p, d)) for _ in stack])
        plain = _counted(lambda: plain_forward(x, stack))
        deep = _counted(lambda: deep_prompt_forward(x, bank, stack, project_prompt_queries=spec.project_prompt_queries))
        rows.append(MeasureRow("deep_skip model", _diff(deep, plain), flops_prompt_attention(spec, "deep_skip").ops()))

    if spec.streams == 1 and spec.attn_per_layer == 1:
        stack = [Layer(AttentionParams.random(d, rng, heads=spec.heads), FeedForward.random(d, rng, spec.ffn_mult)) for _ in range(spec.layers)]
        plain = _counted(lambda: plain_forward(x, stack))
        bank = PromptBank("shallow", [rng.normal(size=(spec.p, d))])
        shallow = _counted(lambda: shallow_prompt_forward(x, bank, stack))
        rows.append(MeasureRow("shallow model", _diff(shallow, plain), flops_prompt_attention(spec, "shallow").ops()))
    return MeasureReport(spec, rows, tol)
