"""Configuration-driven experiment runner and command-line interface.

The runner wires the full pipeline: mesh construction, dynamics
evaluation, matrix assembly (CG or TO), eigensolve, linear-response
solve, first-order prediction, optional re-solve at the perturbed
parameter, Cheeger line search and the level-set velocity field.  All
stage outputs are exported as CSV/VTK/JSON artifacts; reruns with the
same configuration produce bit-identical files.
"""
from __future__ import annotations

import json
import time
import warnings
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import click
import numpy as np

from . import assembly, coherent, dynamics, io, response, spectral
from .mesh import BoundaryCondition, TriMesh, gauss_rule, grid_mesh


class StageError(RuntimeError):
    """Pipeline failure annotated with the stage that raised it."""


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one experiment."""

    model: str = "standard_map"
    model_params: dict = field(default_factory=dict)
    nx: int = 100
    ny: int = 100
    extents: tuple[float, float] = (2 * np.pi, 2 * np.pi)
    periodic: bool = True
    method: str = "cg"
    quadrature_degree: int = 2
    boundary: str = BoundaryCondition.NEUMANN
    eigen_count: int = 6
    target_index: int | None = None
    eps: tuple[float, ...] = (0.5,)
    validate_true: bool = True
    fd_eps: tuple[float, ...] = ()
    line_search_size: int = 100
    full_range: bool = False
    subdivisions: int = 8
    grad_floor: float | None = None
    map_dot_frame: str = "lagrangian"
    out: str | None = None
    dump_matrices: bool = False

    def validate(self) -> None:
        if self.method not in ("cg", "to"):
            raise ValueError(f"method must be 'cg' or 'to', got {self.method!r}")
        if self.periodic and self.boundary == BoundaryCondition.DIRICHLET:
            raise ValueError("periodic meshes are incompatible with Dirichlet conditions")
        if self.eigen_count < 2:
            raise ValueError("need at least two eigenpairs (the first is trivial)")

    @property
    def resolved_target(self) -> int:
        if self.target_index is not None:
            return self.target_index
        # Neumann/torus problems carry the constant mode first.
        return 0 if self.boundary == BoundaryCondition.DIRICHLET else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["extents"] = list(self.extents)
        d["eps"] = list(self.eps)
        d["fd_eps"] = list(self.fd_eps)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        for key in ("extents", "eps", "fd_eps"):
            if key in data and data[key] is not None:
                data[key] = tuple(data[key])
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


PRESETS: dict[str, ExperimentConfig] = {
    "standard-map": ExperimentConfig(
        model="standard_map",
        model_params={"a": 0.98},
        nx=100,
        ny=100,
        extents=(2 * np.pi, 2 * np.pi),
        periodic=True,
        method="cg",
        quadrature_degree=2,
        eps=(0.5,),
        line_search_size=200,
    ),
    "double-gyre": ExperimentConfig(
        model="double_gyre",
        model_params={"t0": 0.0, "t1": 0.6},
        nx=100,
        ny=100,
        extents=(1.0, 1.0),
        periodic=False,
        method="to",
        quadrature_degree=5,
        eps=(0.2,),
        line_search_size=200,
    ),
}


@dataclass
class Prediction:
    eps: float
    u_pred: np.ndarray
    lam_pred: float
    lam_true: float | None = None
    rel_l2_error: float | None = None
    u_true: np.ndarray | None = None


@dataclass
class RunResult:
    """Pipeline outputs plus the JSON-able report."""

    config: ExperimentConfig
    mesh: TriMesh
    image_mesh: TriMesh | None
    M: "np.ndarray"
    K: "np.ndarray"
    L: "np.ndarray"
    pairs: list[spectral.EigenPair]
    pair: spectral.EigenPair
    resp: response.ResponsePair
    predictions: list[Prediction]
    u0_full: np.ndarray
    u_dot_full: np.ndarray
    c_star: float
    h_star: float
    velocity: coherent.LevelVelocityField
    timings: dict[str, float]
    free: np.ndarray | None

    @property
    def report(self) -> dict:
        preds = []
        for p in self.predictions:
            row = {"eps": p.eps, "lambda_pred": p.lam_pred}
            if p.lam_true is not None:
                row["lambda_true"] = p.lam_true
                row["rel_l2_error"] = p.rel_l2_error
            preds.append(row)
        return {
            "model": self.config.model,
            "method": self.config.method,
            "lambda0": self.pair.lam,
            "lambda_dot": self.resp.lam_dot,
            "predictions": preds,
            "c_star": self.c_star,
            "h_star": self.h_star,
            "timings": self.timings,
        }


class _Stages:
    def __init__(self):
        self.timings: dict[str, float] = {}

    def run(self, name: str, fn):
        start = time.perf_counter()
        try:
            result = fn()
        except Exception as exc:
            raise StageError(f"[{name}] {exc}") from exc
        self.timings[name] = time.perf_counter() - start
        return result


def _build_family(config: ExperimentConfig) -> dynamics.ModelFamily:
    params = dict(config.model_params)
    if config.model == "identity" and "periods" not in params:
        params["periods"] = tuple(config.extents) if config.periodic else None
    return dynamics.make_family(config.model, **params)


def _assemble(config: ExperimentConfig, mesh: TriMesh, model: dynamics.DynamicsModel):
    """(K, L, image_mesh) for the configured method."""
    if config.method == "to":
        return assembly.assemble_transfer_operator(mesh, model)
    rule = gauss_rule(config.quadrature_degree)
    t, q = mesh.n_triangles, rule.weights.shape[0]
    pts = mesh.quad_points(rule).reshape(t * q, 2)
    _, jac, _, jac_dot = model.evaluate(pts)
    avals = assembly.diffusion_from_jacobian(jac).reshape(t, q, 2, 2)
    advals = assembly.diffusion_rate_from_jacobians(jac, jac_dot).reshape(t, q, 2, 2)
    stiff = assembly.assemble_stiffness(mesh, avals, rule)
    resp_mat = assembly.assemble_stiffness(mesh, advals, rule)
    return stiff, resp_mat, None


def _assemble_stiffness_only(config: ExperimentConfig, mesh: TriMesh, model: dynamics.DynamicsModel):
    if config.method == "to":
        return assembly.assemble_transfer_operator(mesh, model)[0]
    rule = gauss_rule(config.quadrature_degree)
    return assembly.assemble_stiffness(mesh, assembly.diffusion_tensor(model), rule)


def run(config: ExperimentConfig) -> RunResult:
    """Execute the full pipeline for one configuration."""
    config.validate()
    stages = _Stages()

    mesh = stages.run(
        "mesh", lambda: grid_mesh(config.nx, config.ny, config.extents, config.periodic)
    )
    stages.run("boundary", lambda: BoundaryCondition.validate(config.boundary, mesh))
    family = stages.run("dynamics", lambda: _build_family(config))
    model = family.at(0.0)

    mass = stages.run("mass", lambda: assembly.assemble_mass(mesh))
    stiff, resp_mat, image_mesh = stages.run(
        "assembly", lambda: _assemble(config, mesh, model)
    )

    dirichlet = config.boundary == BoundaryCondition.DIRICHLET
    free = assembly.free_nodes(mesh) if dirichlet else None
    if free is not None:
        mass_r = assembly.reduce_matrix(mass, free)
        stiff_r = assembly.reduce_matrix(stiff, free)
        resp_r = assembly.reduce_matrix(resp_mat, free)
    else:
        mass_r, stiff_r, resp_r = mass, stiff, resp_mat

    pairs = stages.run("eigs", lambda: spectral.eigs(stiff_r, mass_r, config.eigen_count))
    pair = pairs[config.resolved_target]
    # Eigenvectors sharing the target eigenvalue to solver precision
    # (symmetry-induced degeneracies) deflate the bordered solve.
    partners = [
        p.u
        for p in pairs
        if p is not pair and abs(p.lam - pair.lam) <= 1e-6 * max(abs(pair.lam), 1e-300)
    ]
    resp = stages.run(
        "response",
        lambda: response.solve_response(stiff_r, mass_r, resp_r, pair, deflate=partners),
    )

    predictions: list[Prediction] = []

    def _predict_all():
        for eps in config.eps:
            u_pred, lam_pred = response.predict(pair, resp, eps)
            pred = Prediction(eps=eps, u_pred=u_pred, lam_pred=lam_pred)
            if config.validate_true:
                model_eps = family.at(eps)
                stiff_eps = _assemble_stiffness_only(config, mesh, model_eps)
                if free is not None:
                    stiff_eps = assembly.reduce_matrix(stiff_eps, free)
                pairs_eps = spectral.eigs(stiff_eps, mass_r, config.eigen_count)
                tracked = response.track_eigenpair(pairs_eps, pair, mass_r)
                pred.lam_true = tracked.lam
                pred.u_true = tracked.u
                pred.rel_l2_error = response.m_norm(tracked.u - u_pred, mass_r) / response.m_norm(
                    pair.u, mass_r
                )
            predictions.append(pred)

    stages.run("predict", _predict_all)

    n = mesh.n_nodes
    u0_full = assembly.expand_vector(pair.u, free, n) if free is not None else pair.u
    u_dot_full = assembly.expand_vector(resp.u_dot, free, n) if free is not None else resp.u_dot

    c_star, h_star = stages.run(
        "line_search",
        lambda: coherent.line_search_c(
            mesh,
            u0_full,
            model,
            grid_size=config.line_search_size,
            full_range=config.full_range,
            subdivisions=config.subdivisions,
        ),
    )
    velocity = stages.run(
        "level_velocity",
        lambda: coherent.level_velocity(mesh, u0_full, u_dot_full, config.grad_floor),
    )

    result = RunResult(
        config=config,
        mesh=mesh,
        image_mesh=image_mesh,
        M=mass_r,
        K=stiff_r,
        L=resp_r,
        pairs=pairs,
        pair=pair,
        resp=resp,
        predictions=predictions,
        u0_full=u0_full,
        u_dot_full=u_dot_full,
        c_star=c_star,
        h_star=h_star,
        velocity=velocity,
        timings=stages.timings,
        free=free,
    )
    if config.out is not None:
        stages.run("export", lambda: export_run(result, Path(config.out)))
        result.timings = stages.timings
    return result


def export_run(result: RunResult, outdir: Path) -> None:
    """Write every artifact the report can be recomputed from."""
    outdir.mkdir(parents=True, exist_ok=True)
    mesh = result.mesh
    cfg = result.config
    free = result.free
    n = mesh.n_nodes

    io.write_mesh_vtk(
        outdir / "mesh.vtk",
        mesh,
        point_data={"u0": result.u0_full, "u_dot": result.u_dot_full},
    )
    io.write_mesh_csv(outdir, mesh)
    io.write_spectrum_csv(outdir / "spectrum.csv", result.pairs)
    io.write_field_csv(outdir / "u0.csv", mesh, {"u": result.u0_full})

    first = result.predictions[0] if result.predictions else None
    columns = {"u0": result.u0_full, "u_dot": result.u_dot_full}
    if first is not None:
        expand = (
            (lambda v: assembly.expand_vector(v, free, n)) if free is not None else (lambda v: v)
        )
        columns["u_pred"] = expand(first.u_pred)
        if first.u_true is not None:
            columns["u_true"] = expand(first.u_true)
    io.write_field_csv(outdir / "response.csv", mesh, columns)

    curve = coherent.extract_level_set(
        mesh,
        result.u0_full,
        result.c_star,
        model=_build_family(cfg).at(0.0),
        subdivisions=cfg.subdivisions,
    )
    io.write_levelset_csv(outdir / "levelset.csv", curve)
    io.write_velocity_csv(outdir / "vlevel.csv", mesh, result.velocity)

    if cfg.dump_matrices:
        io.write_matrix_coo(outdir / "stiffness.txt", result.K)
        io.write_matrix_coo(outdir / "mass.txt", result.M)
        io.write_matrix_coo(outdir / "response_matrix.txt", result.L)

    report = result.report
    report["config"] = cfg.to_dict()
    io.write_json(outdir / "report.json", report)


def compare_methods(config: ExperimentConfig) -> dict:
    """Run CG and TO on identical meshes and compare the results."""
    cg = run(replace(config, method="cg", out=None, validate_true=False))
    to = run(replace(config, method="to", out=None, validate_true=False))
    mass = cg.M

    u_cg, u_to = cg.pair.u, to.pair.u
    sign = 1.0 if float(u_to @ (mass @ u_cg)) >= 0 else -1.0
    du = response.m_norm(u_cg - sign * u_to, mass)
    ddot = response.m_norm(cg.resp.u_dot - sign * to.resp.u_dot, mass)

    report = {
        "lambda0_cg": cg.pair.lam,
        "lambda0_to": to.pair.lam,
        "lambda0_gap": abs(cg.pair.lam - to.pair.lam),
        "lambda0_rel_gap": abs(cg.pair.lam - to.pair.lam) / abs(cg.pair.lam),
        "lambda_dot_cg": cg.resp.lam_dot,
        "lambda_dot_to": to.resp.lam_dot,
        "u0_distance_m": du,
        "u_dot_distance_m": ddot,
    }
    if config.out is not None:
        outdir = Path(config.out)
        outdir.mkdir(parents=True, exist_ok=True)
        io.write_json(outdir / "compare.json", {**report, "config": config.to_dict()})
    return report


def run_validate_fd(config: ExperimentConfig) -> list[response.FDCheck]:
    """Central-difference validation of the linear response."""
    base = run(replace(config, out=None, validate_true=False))
    family = _build_family(config)

    def solve_at(eps: float):
        stiff_eps = _assemble_stiffness_only(config, base.mesh, family.at(eps))
        if base.free is not None:
            stiff_eps = assembly.reduce_matrix(stiff_eps, base.free)
        return spectral.eigs(stiff_eps, base.M, config.eigen_count)

    eps_list = config.fd_eps or (1e-2, 1e-3)
    rows = response.validate_fd(solve_at, base.pair, base.resp, base.M, eps_list)
    if config.out is not None:
        outdir = Path(config.out)
        outdir.mkdir(parents=True, exist_ok=True)
        io.write_json(
            outdir / "fd_validation.json",
            {
                "lambda_dot": base.resp.lam_dot,
                "rows": [asdict(r) for r in rows],
                "config": config.to_dict(),
            },
        )
    return rows


# -- command line --------------------------------------------------------


def _load_config(config_path, preset, overrides: dict) -> ExperimentConfig:
    if preset is not None:
        if preset not in PRESETS:
            raise click.BadParameter(f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
        cfg = replace(PRESETS[preset])
    elif config_path is not None:
        cfg = ExperimentConfig.from_dict(json.loads(Path(config_path).read_text()))
    else:
        raise click.UsageError("one of --preset or --config is required")
    for key, value in overrides.items():
        if value is not None:
            cfg = replace(cfg, **{key: value})
    return cfg


def _thread_limit(n: int | None):
    if n is None:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=n)
    except ImportError:
        warnings.warn("threadpoolctl not installed; --threads ignored")
        return nullcontext()


def _parse_eps(_ctx, _param, value):
    if value is None:
        return None
    return tuple(float(v) for v in value.split(","))


_shared_options = [
    click.option("--config", "config_path", type=click.Path(exists=True), help="JSON config file."),
    click.option("--preset", type=str, help="Built-in experiment preset."),
    click.option("--method", type=click.Choice(["cg", "to"]), default=None),
    click.option("--eps", callback=_parse_eps, default=None, help="Comma-separated epsilons."),
    click.option("--out", type=click.Path(), default=None, help="Output directory."),
    click.option("--threads", type=int, default=None, help="Cap BLAS/LAPACK threads."),
]


def _with_shared(fn):
    for opt in reversed(_shared_options):
        fn = opt(fn)
    return fn


@click.group()
def main():
    """Finite-time coherent sets and their linear response."""


@main.command("run")
@_with_shared
@click.option("--validate-true/--no-validate-true", default=None, help="Re-solve at each eps.")
@click.option("--dump-matrices", is_flag=True, default=False)
def cmd_run(config_path, preset, method, eps, out, threads, validate_true, dump_matrices):
    """Run the full pipeline for a preset or config file."""
    cfg = _load_config(
        config_path,
        preset,
        {"method": method, "eps": eps, "out": out, "validate_true": validate_true},
    )
    if dump_matrices:
        cfg = replace(cfg, dump_matrices=True)
    with _thread_limit(threads):
        result = run(cfg)
    click.echo(json.dumps(result.report, indent=2, sort_keys=True))


@main.command("compare")
@_with_shared
def cmd_compare(config_path, preset, method, eps, out, threads):
    """Compare the CG and TO discretizations on one configuration."""
    cfg = _load_config(config_path, preset, {"eps": eps, "out": out})
    with _thread_limit(threads):
        report = compare_methods(cfg)
    click.echo(json.dumps(report, indent=2, sort_keys=True))


@main.command("validate-fd")
@_with_shared
def cmd_validate_fd(config_path, preset, method, eps, out, threads):
    """Check the response against central differences of re-solves."""
    cfg = _load_config(config_path, preset, {"method": method, "out": out})
    if eps is not None:
        cfg = replace(cfg, fd_eps=eps)
    with _thread_limit(threads):
        rows = run_validate_fd(cfg)
    for row in rows:
        click.echo(
            f"eps={row.eps:g}  lambda_dot_fd={row.lam_dot_fd:.6g}  "
            f"rel_err={row.lam_dot_rel_err:.3e}  u_dot_err_M={row.u_dot_err_m:.3e}"
        )


@main.command("mesh-dump")
@_with_shared
def cmd_mesh_dump(config_path, preset, method, eps, out, threads):
    """Write only the mesh artifacts (VTK and CSV) for a configuration."""
    cfg = _load_config(config_path, preset, {"out": out})
    mesh = grid_mesh(cfg.nx, cfg.ny, cfg.extents, cfg.periodic)
    outdir = Path(cfg.out or ".")
    outdir.mkdir(parents=True, exist_ok=True)
    io.write_mesh_vtk(outdir / "mesh.vtk", mesh)
    io.write_mesh_csv(outdir, mesh)
    click.echo(f"wrote mesh with {mesh.n_nodes} nodes, {mesh.n_triangles} triangles")


if __name__ == "__main__":
    main()
