"""Batch driver: ``lusingrad {rough,iterate,forms,diagnose,compare}``."""

from __future__ import annotations

import argparse
import hashlib
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, FingerprintMismatchError, LusinError
from .field_core import (
    RAMP_NAME,
    GridDomain,
    SampledVectorField,
    measure,
    norms,
    read_field,
    read_mask,
    write_field,
    write_mask,
)
from .generators import GENERATORS, generate

MODES = ("rough", "iterate", "forms", "diagnose")

# key -> (type, default); None default means required when the mode needs it
SCHEMA = {
    "grid.cells": (int, 256),
    "grid.dim": (int, 2),
    "grid.lo": (float, 0.0),
    "grid.hi": (float, 1.0),
    "field.generator": (str, "rotational-bump"),
    "field.file": (str, ""),
    "field.mask": (str, ""),
    "field.seed": (int, None),
    "field.amplitude": (float, 1.0),
    "field.value": (str, ""),
    "budgets.eps": (float, 0.1),
    "budgets.eta": (float, 0.05),
    "budgets.theta": (float, 0.01),
    "schedule.delta": (float, 0.1),
    "schedule.kappa": (float, 0.01),
    "schedule.eta": (float, 0.05),
    "schedule.n_max": (int, 6),
    "schedule.s": (float, 0.0),
    "schedule.floor": (float, 1e-12),
    "inner.min_level": (int, 0),
    "inner.max_level": (int, 2),
    "inner.sigma_slack": (float, 0.1),
    "inner.sigma_cap": (float, 2.0),
    "norms.oversample": (int, 2),
    "forms.n": (int, 64),
    "forms.form": (str, "dx1"),
    "forms.eps": (float, 0.1),
    "forms.kappa": (float, 1.0),
    "forms.eta": (float, 0.5),
    "forms.n_max": (int, 3),
    "diagnose.resolution": (int, 0),
    "diagnose.tilt": (float, 0.01),
    "diagnose.path_steps": (int, 10),
    "output.dir": (str, "out"),
    "output.dump_fields": (bool, True),
}

FORMS = ("zero", "dx1", "dx2", "exact-sine")


def _parse_value(key: str, text: str):
    typ = SCHEMA[key][0]
    text = text.strip()
    try:
        if typ is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return typ(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _parse_value(key, val)
    return out


@dataclass(frozen=True)
class RunConfig:
    mode: str
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def build(cls, mode: str, settings: dict) -> "RunConfig":
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}")
        vals = {k: d for k, (_, d) in SCHEMA.items()}
        vals.update(settings)
        cfg = cls(mode, vals)
        cfg.validate()
        return cfg

    def validate(self):
        v = self.values
        if v["grid.cells"] < 1 or v["grid.dim"] < 1 or not v["grid.hi"] > v["grid.lo"]:
            raise ConfigError("grid must have positive size")
        positive = {
            "rough": ("budgets.eps", "budgets.eta", "budgets.theta"),
            "iterate": ("schedule.delta", "schedule.kappa", "schedule.eta"),
            "forms": ("forms.eps", "forms.kappa", "forms.eta"),
            "diagnose": (),
        }[self.mode]
        for k in positive:
            if not v[k] > 0:
                raise ConfigError(f"{k} must be positive")
        if v["schedule.s"] < 0:
            raise ConfigError("schedule.s must be non-negative")
        if v["schedule.n_max"] < 1 or v["forms.n_max"] < 1:
            raise ConfigError("n_max must be at least 1")
        if self.mode == "forms":
            if v["forms.form"] not in FORMS:
                raise ConfigError(f"unknown form {v['forms.form']!r}")
            if v["forms.n"] % 8:
                raise ConfigError("forms.n must be a multiple of 8")
            return
        if not v["field.file"]:
            if v["field.generator"] not in GENERATORS:
                raise ConfigError(f"unknown generator {v['field.generator']!r}")
            if v["field.generator"] == "random-trigonometric" and v["field.seed"] is None:
                raise ConfigError("seed is mandatory for generated random fields")

    def canonical(self) -> str:
        return "\n".join(f"{k} = {self.values[k]!r}" for k in sorted(self.values) if k != "output.dir")


def load_field(cfg: RunConfig) -> SampledVectorField:
    if cfg["field.file"]:
        mask = None
        if cfg["field.mask"]:
            _, mask = read_mask(cfg["field.mask"])
        try:
            return read_field(cfg["field.file"], mask)
        except OSError as exc:
            raise ConfigError(f"cannot read field: {exc}") from None
    dom = GridDomain.box(cfg["grid.cells"], cfg["grid.lo"], cfg["grid.hi"], cfg["grid.dim"])
    params = {"amplitude": cfg["field.amplitude"]}
    if cfg["field.seed"] is not None:
        params["seed"] = cfg["field.seed"]
    if cfg["field.value"]:
        try:
            params["value"] = [float(x) for x in cfg["field.value"].split(",")]
        except ValueError:
            raise ConfigError("field.value must be a comma-separated list") from None
    return generate(cfg["field.generator"], dom, **params)


def fingerprint(cfg: RunConfig, data: bytes) -> str:
    h = hashlib.sha256()
    h.update(cfg.mode.encode())
    h.update(cfg.canonical().encode())
    h.update(data)
    return h.hexdigest()


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_kv(path: Path, rows: list):
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in rows:
            fh.write(f"{k} = {_fmt(v)}\n")


def read_kv(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if " = " in line:
                k, v = line.split(" = ", 1)
                out[k] = v
    return out


def write_potential(path: Path, phi, index: int):
    """Nonzero simplex table of one potential term."""
    idx, bary, grads = phi.nonzero_table()
    N = phi.N
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            f"POT1 term={index} N={N} origin={','.join(repr(float(o)) for o in phi.origin)} "
            f"H={phi.H!r} r={phi.r!r} level={phi.level} counts={','.join(str(c) for c in phi.counts)} "
            f"ramp={RAMP_NAME.replace(' ', '_')} rows={len(idx)}\n"
        )
        for i, b, g in zip(idx, bary, grads):
            fh.write(" ".join(str(int(x)) for x in i) + " " + " ".join(repr(float(x)) for x in b) + " ")
            fh.write(" ".join(repr(float(x)) for x in g) + "\n")


# ----------------------------------------------------------------------------
# modes
# ----------------------------------------------------------------------------


def _rough(cfg: RunConfig, v: SampledVectorField, out: Path, rows: list, cert_rows: list) -> bool:
    from .pl_potential import rough_approximate

    eps, eta, theta = cfg["budgets.eps"], cfg["budgets.eta"], cfg["budgets.theta"]
    c = rough_approximate(
        v,
        eps,
        eta,
        theta,
        min_level=cfg["inner.min_level"],
        max_level=cfg["inner.max_level"],
        sigma_slack=cfg["inner.sigma_slack"],
        sigma_cap=cfg["inner.sigma_cap"],
    )
    shares = c.shares()
    cert_rows += [
        ("eps", eps),
        ("eta", eta),
        ("theta", theta),
        ("eps_achieved", c.eps_achieved),
        ("eta_achieved", c.eta_achieved),
        ("theta_achieved", c.theta_achieved),
        ("level", c.level),
        ("r", c.r),
        ("Lambda", c.Lambda),
        ("sigma", c.sigma),
        ("oscillation", c.oscillation),
        ("share.truncation", shares["truncation"]),
        ("share.repair", shares["repair"]),
        ("share.shrink", shares["shrink"]),
        ("share.tube", shares["tube"]),
        ("tube.measure_bound", c.tube.measure_bound),
        ("K.cells", int(c.K_mask.sum())),
    ]
    if cfg["output.dump_fields"]:
        write_mask(out / "K_mask.lgf", v.domain, c.K_mask)
        write_potential(out / "potential_0.txt", c.phi, 0)
    return c.eps_achieved <= eps and c.eta_achieved <= eta and c.theta_achieved <= theta


def _iterate(cfg: RunConfig, v: SampledVectorField, out: Path, rows: list, cert_rows: list) -> bool:
    from .scheme import Schedule, run

    sch = Schedule(
        cfg["schedule.delta"],
        cfg["schedule.kappa"],
        cfg["schedule.eta"],
        cfg["schedule.n_max"],
        cfg["schedule.s"],
        cfg["schedule.floor"],
    )
    fc = run(
        v,
        sch,
        norm_oversample=cfg["norms.oversample"],
        min_level=cfg["inner.min_level"],
        max_level=cfg["inner.max_level"],
        sigma_slack=cfg["inner.sigma_slack"],
        sigma_cap=cfg["inner.sigma_cap"],
    )
    total = measure(v.domain)
    checks = fc.checks()
    cert_rows += [
        ("delta", sch.delta),
        ("kappa", sch.kappa),
        ("eta", sch.eta),
        ("n_max", sch.n_max),
        ("s", sch.s),
        ("n_final", fc.n_final),
        ("measure_A", fc.measure_A_bound),
        ("measure_A_ratio", fc.measure_A_bound / total),
        ("A.cells", int(fc.A_mask.sum())),
        ("residual_sup", fc.residual_sup),
        ("residual_bound", fc.residual_bound),
        ("Z_norm", fc.Z_norm),
        ("Z_bound", fc.Z_bound),
        ("Y_norm", fc.Y_norm),
        ("Y_bound", fc.Y_bound),
        ("v_X", fc.v_X),
    ]
    cert_rows += [(f"check.{k}", ok) for k, ok in checks.items()]
    cols = [
        "n",
        "eps_n",
        "eta_n",
        "theta_n",
        "eta_inner",
        "not_K_fraction",
        "phi_Z_bound",
        "phi_Z",
        "phi_Y",
        "pre_clamp_sup",
        "pre_clamp_off_K_sup",
        "clamp_bound",
        "post_clamp_sup",
        "intersection_residual",
        "decay_bound",
        "clamp_active",
        "level",
        "r",
        "Lambda",
        "sigma",
    ]
    with open(out / "schedule.txt", "w", encoding="utf-8") as fh:
        fh.write(" ".join(cols + ["partial_Y"]) + "\n")
        for rec, py in zip(fc.records, fc.partial_Y):
            fh.write(" ".join(_fmt(getattr(rec, c)) for c in cols) + " " + _fmt(py) + "\n")
    if cfg["output.dump_fields"]:
        write_mask(out / "A_mask.lgf", v.domain, fc.A_mask)
        for j, phi in enumerate(fc.phi_tilde.terms):
            write_potential(out / f"potential_{j}.txt", phi, j)
    return all(checks.values())


def _omega(name: str):
    def fn(p):
        z = np.zeros(p.shape[:-1])
        if name == "zero":
            return np.stack([z, z], -1)
        if name == "dx1":
            return np.stack([z + 1.0, z], -1)
        if name == "dx2":
            return np.stack([z, z + 1.0], -1)
        a, b = 2 * np.pi * p[..., 0], 2 * np.pi * p[..., 1]
        # d of sin(2 pi x1) cos(2 pi x2) / (2 pi)
        return np.stack([np.cos(a) * np.cos(b), -np.sin(a) * np.sin(b)], -1)

    return fn


def _forms(cfg: RunConfig, out: Path, rows: list, cert_rows: list) -> bool:
    from .forms import localize, nearly_exact, sample_form, torus_atlas

    atlas = torus_atlas(cfg["forms.n"])
    omega = sample_form(_omega(cfg["forms.form"]), atlas)
    cert = nearly_exact(
        omega,
        atlas,
        cfg["forms.eps"],
        kappa=cfg["forms.kappa"],
        eta=cfg["forms.eta"],
        n_max=cfg["forms.n_max"],
        min_level=cfg["inner.min_level"],
        max_level=cfg["inner.max_level"],
        sigma_slack=cfg["inner.sigma_slack"],
        sigma_cap=cfg["inner.sigma_cap"],
    )
    ys = np.arange(atlas.n) * atlas.h
    h_loops = sum(cert.loop_meets_A((0.0, y), 0) for y in ys)
    v_loops = sum(cert.loop_meets_A((x, 0.0), 1) for x in ys)
    cert_rows += [
        ("form", cfg["forms.form"]),
        ("torus.n", atlas.n),
        ("eps", cert.eps),
        ("eps_prime", cert.eps_prime),
        ("measure_A", cert.measure_A_bound),
        ("A.cells", int(cert.A_cells.sum())),
        ("tube_bound", cert.tube_bound),
        ("residual_sup", cert.residual_sup),
        ("tolerance", cert.tolerance),
        ("loops.axis1.meeting_A", int(h_loops)),
        ("loops.axis2.meeting_A", int(v_loops)),
        ("loops.per_axis", atlas.n),
    ]
    if cfg["output.dump_fields"]:
        with open(out / "atlas.txt", "w", encoding="utf-8") as fh:
            fh.write(f"torus m={atlas.m} n={atlas.n} charts={len(atlas.charts)}\n")
            for i, c in enumerate(atlas.charts):
                fh.write(f"chart {i} key={','.join(map(str, c.key))} lo={','.join(repr(float(x)) for x in c.lo)} width={c.width!r}\n")
        for cf in localize(omega, atlas):
            tag = "indices=" + ";".join(",".join(map(str, lam)) for lam in cf.form.indices)
            write_field(out / f"chart_{cf.chart}_form.lgf", SampledVectorField(cf.domain, cf.form.values), tag)
        torus = GridDomain(np.zeros(atlas.m), atlas.h, np.ones((atlas.n,) * atlas.m, dtype=bool))
        write_mask(out / "A_mask.lgf", torus, cert.A_cells)
    return cert.measure_A_bound <= cert.eps and cert.residual_sup <= cert.tolerance


def _diagnose(cfg: RunConfig, v: SampledVectorField, out: Path, rows: list, cert_rows: list) -> bool:
    from .graph_diagnostics import PlaneSpec, graph_area, plane_distance, projected_measure, transversality_gap
    from .preprocess import choose_sigma, luzin_truncate, mollify

    dom = v.domain
    sigma = min(choose_sigma(dom, cfg["inner.sigma_slack"], floor=0.0), cfg["inner.sigma_cap"] * dom.h)
    v2 = mollify(luzin_truncate(v, cfg["budgets.eps"] * measure(dom) / 4.0).v1, sigma)
    gap = transversality_gap(v2)
    area = graph_area(v2)
    res = cfg["diagnose.resolution"] or None
    steps = cfg["diagnose.path_steps"]
    angles = np.linspace(0.0, cfg["diagnose.tilt"], steps)
    horiz = PlaneSpec.horizontal(dom.N)
    pm = []
    for a in angles:
        plane = PlaneSpec.tilted(dom.N, float(a))
        pm.append((float(a), plane_distance(plane, horiz), projected_measure(v2, plane, res, gap=gap)))
    jumps = [abs(pm[i + 1][2].measure - pm[i][2].measure) for i in range(len(pm) - 1)]
    cell = max(p[2].raster_cell for p in pm)
    cert_rows += [
        ("sigma", sigma),
        ("graph_area", area),
        ("domain_measure", measure(dom)),
        ("transversality_gap", gap),
        ("raster_cell", cell),
        ("max_jump", max(jumps) if jumps else 0.0),
        ("max_jump_cells", (max(jumps) / cell) if jumps else 0.0),
    ]
    for i, (a, d, p) in enumerate(pm):
        cert_rows += [(f"path.{i}.angle", a), (f"path.{i}.distance", d), (f"path.{i}.measure", p.measure)]
    return area >= measure(dom) and gap > 0


def run_config(cfg: RunConfig) -> int:
    """Execute one configured run; returns the process exit code."""
    t0 = time.perf_counter()
    if cfg.mode == "forms":
        data = b""
        v = None
    else:
        v = load_field(cfg)
        data = v.values.tobytes() + v.domain.mask.tobytes()
    fp = fingerprint(cfg, data)
    out = Path(cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    rows = [("mode", cfg.mode), ("version", __version__), ("fingerprint", fp)]
    cert_rows: list = []
    code = 0
    error = ""
    try:
        if cfg.mode == "rough":
            ok = _rough(cfg, v, out, rows, cert_rows)
        elif cfg.mode == "iterate":
            ok = _iterate(cfg, v, out, rows, cert_rows)
        elif cfg.mode == "forms":
            ok = _forms(cfg, out, rows, cert_rows)
        else:
            ok = _diagnose(cfg, v, out, rows, cert_rows)
    except LusinError as exc:
        ok = False
        code = exc.exit_code
        error = str(exc)
    if v is not None:
        if cfg["output.dump_fields"]:
            write_field(out / "input_field.lgf", v)
        cert_rows.insert(0, ("input.X_norm", norms(v, v.domain).x_norm))
    status = "OK" if ok else "FAILED"
    if not ok and code == 0:
        code = 3
    write_kv(out / "certificate.txt", [("mode", cfg.mode), ("fingerprint", fp)] + cert_rows)
    rows += [("status", status), ("error", error or "none")] + cert_rows
    rows.append(("wall_clock_s", time.perf_counter() - t0))
    write_kv(out / "metrics.txt", rows)
    with open(out / "config.txt", "w", encoding="utf-8") as fh:
        fh.write(f"mode = {cfg.mode}\n{cfg.canonical()}\n")
    print(f"{cfg.mode}: {status}" + (f" ({error})" if error else "") + f" -> {out}")
    return code


# ----------------------------------------------------------------------------
# compare
# ----------------------------------------------------------------------------

IGNORED = ("wall_clock_s",)


def compare(a: dict, b: dict, tol: float = 1e-12) -> list:
    """Field-by-field differences; numbers compare with relative-or-absolute tolerance ``tol``."""
    if a.get("mode") != b.get("mode") or a.get("fingerprint") != b.get("fingerprint"):
        raise FingerprintMismatchError("mode or fingerprint mismatch")
    diffs = []
    for key in sorted(set(a) | set(b)):
        if key in IGNORED:
            continue
        if key not in a or key not in b:
            diffs.append((key, a.get(key, "<missing>"), b.get(key, "<missing>")))
            continue
        x, y = a[key], b[key]
        try:
            fx, fy = float(x), float(y)
        except ValueError:
            if x != y:
                diffs.append((key, x, y))
            continue
        if not abs(fx - fy) <= tol * max(1.0, abs(fx), abs(fy)):
            diffs.append((key, x, y))
    return diffs


def _report_path(p: str) -> Path:
    path = Path(p)
    return path / "metrics.txt" if path.is_dir() else path


# ----------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lusingrad", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for mode in MODES:
        p = sub.add_parser(mode, help=f"run {mode} mode")
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
        p.add_argument("--out", help="output directory (output.dir)")
        p.add_argument("--seed", type=int, help="field.seed")
        p.add_argument("--generator", help="field.generator")
        p.add_argument("--cells", type=int, help="grid.cells")
    c = sub.add_parser("compare", help="compare two reports")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--tol", type=float, default=1e-12)
    return ap


def _settings(args) -> dict:
    settings = {}
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        settings.update(parse_config_text(text))
    overrides = list(args.set)
    for flag, key in (("out", "output.dir"), ("seed", "field.seed"), ("generator", "field.generator"), ("cells", "grid.cells")):
        val = getattr(args, flag)
        if val is not None:
            overrides.append(f"{key}={val}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must be KEY=VALUE")
        key, val = item.split("=", 1)
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        settings[key] = _parse_value(key, val)
    return settings


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "compare":
            a = read_kv(_report_path(args.a))
            b = read_kv(_report_path(args.b))
            diffs = compare(a, b, args.tol)
            for key, x, y in diffs:
                print(f"DIFF {key}: {x} != {y}")
            print(f"{len(diffs)} differing fields")
            return 1 if diffs else 0
        cfg = RunConfig.build(args.command, _settings(args))
        return run_config(cfg)
    except LusinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
