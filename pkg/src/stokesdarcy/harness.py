"""Run configuration, pipeline stages, profile metrics and report files."""
from __future__ import annotations

import configparser
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .coefficients import REFERENCE, EffectiveCoefficients, compute_all
from .fem.fields import read_profile_csv, write_profile_csv
from .macro import VARIANTS, ConditionSet, MacroProblem, solve_macro
from .porescale import ensemble_average, total_variation

log = logging.getLogger(__name__)

DEFAULTS = {
    "geometry": {"d": "0.5", "eps": "0.05", "m": "4", "h_cell": "0.05", "circle_segments": "auto",
                 "h_macro": "0.025", "h_pm": "auto", "h_ff": "auto", "pore_circle_segments": "32"},
    "macro": {"condition_sets": "classical, generalized, higher_order", "alpha": "1.0",
              "lid_velocity": "1.0", "coefficients": ""},
    "ensemble": {"n_samples": "16", "n_points": "400", "workers": "1"},
    "sections": {"sigma": "0.0 0.0 1.0 0.0", "x1_0.7": "0.7 -0.5 0.7 0.5"},
    "assertions": {"ordering": "true", "v1_sigma": "0.05", "pressure_agreement": "0.02",
                   "pressure_section": "x1_0.7", "pressure_vs_porescale": "0.10",
                   "reference": "0.05", "reference_leta": "0.20", "reference_zero": "1e-3",
                   "mms_tolerance": "0.2", "mms_pressure_tolerance": "0.3"},
    "output": {"dir": "out"},
}

MACRO_DOMAIN = (0.0, 1.0, -0.5, 0.5)


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"stage {stage!r} failed: {exc}")
        self.stage = stage
        self.exc = exc


def _opt_float(s):
    return None if s.strip().lower() in ("auto", "none", "") else float(s)


def _opt_int(s):
    return None if s.strip().lower() in ("auto", "none", "") else int(s)


@dataclass
class RunConfig:
    d: float = 0.5
    eps: float = 0.05
    m: int = 4
    h_cell: float = 0.05
    circle_segments: int | None = None
    h_macro: float = 0.025
    h_pm: float | None = None
    h_ff: float | None = None
    pore_circle_segments: int | None = 32
    condition_sets: tuple = VARIANTS
    alpha: float = 1.0
    lid_velocity: float = 1.0
    coefficients_file: str = ""
    n_samples: int = 16
    n_points: int = 400
    workers: int = 1
    sections: dict = field(default_factory=lambda: {"sigma": ((0.0, 0.0), (1.0, 0.0)),
                                                    "x1_0.7": ((0.7, -0.5), (0.7, 0.5))})
    assertions: dict = field(default_factory=dict)
    out: str = "out"

    @classmethod
    def load(cls, path=None, overrides=(), out=None):
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp.read_dict(DEFAULTS)
        if path:
            if not os.path.exists(path):
                raise ConfigError(f"config file {path!r} does not exist")
            user = configparser.ConfigParser()
            user.optionxform = str
            user.read(path)
            # a user [sections] block replaces the default cross-sections
            if user.has_section("sections"):
                cp.remove_section("sections")
                cp.add_section("sections")
            cp.read_dict(user)
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            key, value = item.split("=", 1)
            sec, k = key.strip().split(".", 1)
            if not cp.has_section(sec):
                cp.add_section(sec)
            cp.set(sec, k, value.strip())
        if out is not None:
            cp.set("output", "dir", out)
        return cls.from_parser(cp)

    @classmethod
    def from_parser(cls, cp):
        g, mac, ens = cp["geometry"], cp["macro"], cp["ensemble"]
        try:
            sections = {}
            for name, val in cp["sections"].items():
                x = [float(t) for t in val.replace(",", " ").split()]
                if len(x) != 4:
                    raise ConfigError(f"section {name!r} needs four numbers x0 y0 x1 y1")
                sections[name] = ((x[0], x[1]), (x[2], x[3]))
            sets = tuple(s.strip() for s in mac["condition_sets"].split(",") if s.strip())
            cfg = cls(d=float(g["d"]), eps=float(g["eps"]), m=int(g["m"]), h_cell=float(g["h_cell"]),
                      circle_segments=_opt_int(g["circle_segments"]), h_macro=float(g["h_macro"]),
                      h_pm=_opt_float(g["h_pm"]), h_ff=_opt_float(g["h_ff"]),
                      pore_circle_segments=_opt_int(g["pore_circle_segments"]),
                      condition_sets=sets, alpha=float(mac["alpha"]),
                      lid_velocity=float(mac["lid_velocity"]),
                      coefficients_file=mac["coefficients"].strip(),
                      n_samples=int(ens["n_samples"]), n_points=int(ens["n_points"]),
                      workers=int(ens["workers"]), sections=sections,
                      assertions=dict(cp["assertions"]), out=cp["output"]["dir"])
        except (KeyError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad configuration value: {exc}") from exc
        cfg.validate()
        return cfg

    def validate(self):
        for s in self.condition_sets:
            if s not in VARIANTS:
                raise ConfigError(f"unknown condition set {s!r}; expected one of {VARIANTS}")
        if not self.condition_sets:
            raise ConfigError("no condition sets configured")
        if not 0 < self.d < 1:
            raise ConfigError("inclusion diameter d must lie in (0, 1)")
        if not self.eps > 0 or abs(round(1 / self.eps) - 1 / self.eps) > 1e-9:
            raise ConfigError("eps must be positive with 1/eps an integer")
        if self.n_samples < 1 or self.n_points < 2:
            raise ConfigError("need n_samples >= 1 and n_points >= 2")
        if self.coefficients_file and not os.path.exists(self.coefficients_file):
            raise ConfigError(f"coefficients file {self.coefficients_file!r} does not exist")
        x0, x1, y0, y1 = MACRO_DOMAIN
        for name, seg in self.sections.items():
            for x, y in seg:
                if not (x0 - 1e-12 <= x <= x1 + 1e-12 and y0 - 1e-12 <= y <= y1 + 1e-12):
                    raise ConfigError(f"cross-section {name!r} leaves the macro domain")
        return self

    def assertion(self, key, kind=float):
        """Configured threshold, or None when disabled ('none' / 'off' / 'false')."""
        val = str(self.assertions.get(key, "none")).strip().lower()
        if val in ("none", "off", "false", "no", ""):
            return None
        if kind is bool:
            return val in ("true", "on", "yes", "1")
        return kind(val)


# ---------------------------------------------------------------------------
# metrics and report


def compare_profiles(model, reference, s_model=None, s_reference=None):
    """Relative L2, max-norm and signed mean deviation over pairwise-valid samples."""
    a = np.asarray(model, float)
    b = np.asarray(reference, float)
    if a.shape != b.shape:
        raise ValueError(f"profiles differ in length ({a.shape} vs {b.shape})")
    if s_model is not None and s_reference is not None:
        sa, sb = np.asarray(s_model, float), np.asarray(s_reference, float)
        if sa.shape != sb.shape or not np.allclose(sa, sb, rtol=0, atol=1e-12):
            raise ValueError("profiles are sampled at different abscissae")
    ok = np.isfinite(a) & np.isfinite(b)
    if not ok.any():
        raise ValueError("no sample is valid in both profiles")
    da = a[ok] - b[ok]
    nb = np.linalg.norm(b[ok])
    rel = float(np.linalg.norm(da) / nb) if nb > 0 else (0.0 if not da.any() else np.inf)
    return {"rel_l2": rel, "max": float(np.abs(da).max()), "mean": float(da.mean()),
            "n": int(ok.sum())}


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


@dataclass
class ComparisonReport:
    coefficients: EffectiveCoefficients | None = None
    rows: list = field(default_factory=list)  # dicts model, section, quantity, metrics, n_samples
    checks: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    title: str = "Stokes-Darcy interface condition comparison"

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def error(self, model, section, quantity):
        for r in self.rows:
            if (r["model"], r["section"], r["quantity"]) == (model, section, quantity):
                return r["rel_l2"]
        raise KeyError((model, section, quantity))

    def to_text(self):
        out = [f"# {self.title}", ""]
        if self.coefficients is not None:
            c = self.coefficients
            out.append(f"[coefficients] d={c.d!r} m={c.m} h={c.h!r}")
            deltas = c.reference_deltas()
            for k, v in c.as_dict().items():
                line = f"{k:>6} = {v: .6e}"
                if k in deltas:
                    kind = "rel" if REFERENCE[k] else "abs"
                    line += f"   ref {REFERENCE[k]: .3e}  delta({kind}) {deltas[k]: .3e}"
                out.append(line)
            out.append("")
        if self.rows:
            out.append("[profiles] relative L2 / max / signed mean vs ensemble mean")
            out.append(f"{'model':<14}{'section':<10}{'qty':<5}{'rel_l2':>12}{'max':>12}"
                       f"{'mean':>13}{'n':>6}{'members':>9}")
            for r in self.rows:
                out.append(f"{r['model']:<14}{r['section']:<10}{r['quantity']:<5}"
                           f"{r['rel_l2']:>12.4e}{r['max']:>12.4e}{r['mean']:>13.4e}"
                           f"{r['n']:>6}{r['n_samples']:>9}")
            out.append("")
        if self.notes:
            out += ["[notes]"] + self.notes + [""]
        out.append("[assertions]")
        for c in self.checks:
            out.append(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
        if not self.checks:
            out.append("(none configured)")
        out.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        out.append("")
        for k, v in self.timings.items():
            out.append(f"# time {k}: {v:.2f} s")
        return "\n".join(out) + "\n"

    def write(self, path):
        with open(path, "w") as f:
            f.write(self.to_text())


# ---------------------------------------------------------------------------
# stages


def _mkdir(path):
    os.makedirs(path, exist_ok=True)
    return path


def profile_path(out, model, section):
    return os.path.join(out, f"profile_{model}_{section}.csv")


def stage_coefficients(cfg: RunConfig, write=True):
    if cfg.coefficients_file:
        c = EffectiveCoefficients.read(cfg.coefficients_file)
    else:
        c = compute_all(cfg.d, cfg.m, cfg.h_cell, cfg.circle_segments, workers=cfg.workers)
    if write:
        c.write(os.path.join(_mkdir(cfg.out), "coefficients.txt"))
    return c


def condition_set(cfg, variant, coeffs):
    if variant == "classical":
        return ConditionSet.classical(cfg.alpha, eps=cfg.eps)
    return ConditionSet(variant, coeffs=coeffs, eps=cfg.eps)


def stage_macro(cfg: RunConfig, coeffs, write=True):
    """One macro solve per condition set; writes profile_<model>_<section>.csv."""
    problem = MacroProblem(K=coeffs.K, eps=cfg.eps, h=cfg.h_macro, lid_velocity=cfg.lid_velocity)
    sols, notes = {}, []
    for variant in cfg.condition_sets:
        sol = solve_macro(problem, condition_set(cfg, variant, coeffs))
        sols[variant] = sol
        i = sol.info
        notes.append(f"{variant}: residual {i['residual']:.2e}, sigma flux mismatch "
                     f"{i['flux_mismatch']:.2e}, net outflow {i['net_outflow']:.2e}")
        if write:
            for name, seg in cfg.sections.items():
                s, pts, v, p = sol.profile(seg, cfg.n_points)
                write_profile_csv(profile_path(_mkdir(cfg.out), variant, name), s, pts, v, p)
    return sols, notes


def stage_porescale(cfg: RunConfig, write=True):
    extra = {k: v for k, v in (("h_pm", cfg.h_pm), ("h_ff", cfg.h_ff),
                               ("circle_segments", cfg.pore_circle_segments)) if v is not None}
    ens = ensemble_average(cfg.eps, cfg.d, cfg.n_samples, cfg.sections, cfg.n_points,
                           workers=cfg.workers, lid_velocity=cfg.lid_velocity, **extra)
    if write:
        _mkdir(cfg.out)
        with open(os.path.join(cfg.out, "ensemble_manifest.txt"), "w") as f:
            f.write(ens.manifest())
        for name, prof in ens.profiles.items():
            write_profile_csv(profile_path(cfg.out, "porescale", name), prof.s, prof.points,
                              prof.v, prof.p)
    return ens


def _read_profile(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing profile {path}")
    d = read_profile_csv(path)
    return d["s"], np.column_stack([d["v1"], d["v2"]]), d.get("p")


def _pore_count(out):
    path = os.path.join(out, "ensemble_manifest.txt")
    if os.path.exists(path):
        with open(path) as f:
            return sum(1 for ln in f if ln.startswith("member "))
    return 0


def stage_compare(cfg: RunConfig, report: ComparisonReport | None = None):
    """Metrics of every written macro profile against the written ensemble profiles."""
    report = report or ComparisonReport()
    n_members = _pore_count(cfg.out)
    for name in cfg.sections:
        s_ref, v_ref, p_ref = _read_profile(profile_path(cfg.out, "porescale", name))
        for variant in cfg.condition_sets:
            s, v, p = _read_profile(profile_path(cfg.out, variant, name))
            for q, a, b in (("v1", v[:, 0], v_ref[:, 0]), ("v2", v[:, 1], v_ref[:, 1]),
                            ("p", p, p_ref)):
                m = compare_profiles(a, b, s, s_ref)
                report.rows.append(dict(model=variant, section=name, quantity=q,
                                        n_samples=n_members, **m))
        report.notes.append(f"TV of ensemble-mean v2 along {name}: "
                            f"{total_variation(v_ref[:, 1]):.4e}")
    add_checks(cfg, report)
    return report


def add_checks(cfg: RunConfig, report: ComparisonReport):
    """Configured assertions; each one is computed from the report rows."""
    sets = set(cfg.condition_sets)
    err = report.error
    tol = cfg.assertion("ordering", bool)
    if tol and set(VARIANTS) <= sets and "sigma" in cfg.sections:
        ho, ge, cl = (err(v, "sigma", "v2") for v in ("higher_order", "generalized", "classical"))
        report.checks.append(Check("v2 ordering along sigma", ho < ge < cl and ho <= 0.5 * cl,
                                   f"higher_order {ho:.4e} < generalized {ge:.4e} < classical "
                                   f"{cl:.4e}; higher_order <= 0.5 classical"))
        report.checks.append(Check("higher order beats classical", ho < cl,
                                   f"{ho:.4e} < {cl:.4e} (fails loudly on a sign or assembly bug)"))
    tol = cfg.assertion("v1_sigma")
    if tol is not None and "sigma" in cfg.sections:
        for v in ("generalized", "higher_order"):
            if v in sets:
                e = err(v, "sigma", "v1")
                report.checks.append(Check(f"{v} v1 along sigma", e <= tol, f"{e:.4e} <= {tol:g}"))
    sec = cfg.assertions.get("pressure_section", "x1_0.7")
    tol = cfg.assertion("pressure_agreement")
    if tol is not None and {"generalized", "higher_order"} <= sets and sec in cfg.sections:
        _, _, pg = _read_profile(profile_path(cfg.out, "generalized", sec))
        _, _, ph = _read_profile(profile_path(cfg.out, "higher_order", sec))
        e = compare_profiles(pg, ph)["rel_l2"]
        report.checks.append(Check(f"generalized vs higher_order pressure at {sec}", e <= tol,
                                   f"{e:.4e} <= {tol:g}"))
    tol = cfg.assertion("pressure_vs_porescale")
    if tol is not None and sec in cfg.sections:
        for v in ("generalized", "higher_order"):
            if v in sets:
                e = err(v, sec, "p")
                report.checks.append(Check(f"{v} pressure at {sec}", e <= tol,
                                           f"{e:.4e} <= {tol:g}"))
        if "classical" in sets:
            others = [err(v, sec, "p") for v in ("generalized", "higher_order") if v in sets]
            if others:
                e = err("classical", sec, "p")
                report.checks.append(Check(f"classical pressure at {sec} is worse", e > max(others),
                                           f"{e:.4e} > {max(others):.4e}"))
    return report


def coefficient_checks(cfg: RunConfig, coeffs, report: ComparisonReport):
    tol = cfg.assertion("reference")
    if tol is None or cfg.coefficients_file:
        return report
    deltas = coeffs.reference_deltas()
    if not deltas:
        report.notes.append("reference deltas omitted: geometry differs from the tabulated one")
        return report
    leta, zero = cfg.assertion("reference_leta") or tol, cfg.assertion("reference_zero") or 1e-3
    for k, dlt in deltas.items():
        if REFERENCE[k] == 0:
            report.checks.append(Check(f"coefficient {k}", abs(dlt) <= zero,
                                       f"|{dlt:.3e}| <= {zero:g}"))
        else:
            t = leta if k == "Leta" else tol
            report.checks.append(Check(f"coefficient {k}", abs(dlt) <= t,
                                       f"relative deviation {dlt:+.4f} within {t:g}"))
    return report


def run_pipeline(cfg: RunConfig):
    """coefficients -> macro solves -> pore-scale ensemble -> comparison; files under cfg.out."""
    report = ComparisonReport()
    _mkdir(cfg.out)
    stage = "coefficients"
    try:
        t = time.perf_counter()
        coeffs = stage_coefficients(cfg)
        report.coefficients = coeffs
        coefficient_checks(cfg, coeffs, report)
        report.timings[stage] = time.perf_counter() - t
        stage = "macro"
        t = time.perf_counter()
        _, notes = stage_macro(cfg, coeffs)
        report.notes += notes
        report.timings[stage] = time.perf_counter() - t
        stage = "porescale"
        t = time.perf_counter()
        stage_porescale(cfg)
        report.timings[stage] = time.perf_counter() - t
        stage = "compare"
        stage_compare(cfg, report)
    except Exception as exc:
        report.notes.append(f"aborted in stage {stage}: {exc}")
        report.checks.append(Check(f"stage {stage}", False, str(exc)))
        report.write(os.path.join(cfg.out, "report.txt"))
        raise PipelineError(stage, exc) from exc
    report.write(os.path.join(cfg.out, "report.txt"))
    return report


def run_mms(cfg: RunConfig, levels=(8, 16, 32, 64)):
    """Manufactured-solution study; checks the finest observed rates."""
    from .mms import run_convergence

    report = ComparisonReport(title="manufactured-solution convergence study")
    tol = cfg.assertion("mms_tolerance") or 0.2
    ptol = cfg.assertion("mms_pressure_tolerance") or 0.3
    expected = {("stokes", "velocity_l2"): (3.0, tol), ("stokes", "velocity_h1"): (2.0, tol),
                ("stokes", "pressure_l2"): (2.0, ptol), ("darcy_p1", "l2"): (2.0, tol),
                ("darcy_p2", "l2"): (3.0, tol)}
    for st in run_convergence(levels):
        report.notes += st.lines()
        for norm, rates in st.orders.items():
            if (st.name, norm) in expected:
                target, t = expected[(st.name, norm)]
                r = float(rates[-1])
                report.checks.append(Check(f"{st.name} {norm} order", abs(r - target) <= t,
                                           f"{r:.3f} = {target:g} +- {t:g}"))
    _mkdir(cfg.out)
    report.write(os.path.join(cfg.out, "report.txt"))
    return report
