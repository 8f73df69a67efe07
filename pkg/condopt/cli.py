from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from condopt.config import RunConfig, load_config, parse_overrides
from condopt.core import PosteriorTree, fit, hmap, inclusion_probabilities, predict_density
from condopt.dataset import BINARY, ColumnSpec, atomic_write_text, format_rows, read_csv, resolve_space, write_csv
from condopt.errors import EXIT_OK, ConfigError, DataError, exit_code_for
from condopt.inference import independence_test, log_predictive_score
from condopt.plotting import density_png, hmap_svg
from condopt.serialize import load_model, save_model
from condopt.simulate import SCENARIOS, Scenario, generator, scenario_config, simulate
from condopt.space import SampleSpace

logger = logging.getLogger("condopt")

DEFAULT_X_RESOLUTION = 16
MAX_GRID_CELLS = 1 << 16


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override a config key (repeatable)")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condopt", description="Conditional density estimation with cond-OPT priors.")
    commands = parser.add_subparsers(dest="command", required=True)

    fit_cmd = commands.add_parser("fit", help="Fit the posterior and write the model JSON")
    _common(fit_cmd)
    fit_cmd.add_argument("input", help="CSV with a header row")
    fit_cmd.add_argument("--output", required=True, help="Model JSON path")

    grid_cmd = commands.add_parser("grid", help="Evaluate the posterior-mean conditional density on a grid")
    _common(grid_cmd)
    grid_cmd.add_argument("model")
    grid_cmd.add_argument("--x", action="append", help="Predictor point, comma-separated (repeatable)")
    grid_cmd.add_argument("--x-resolution", type=int, default=DEFAULT_X_RESOLUTION)
    grid_cmd.add_argument("--y-resolution", type=int, default=None)
    grid_cmd.add_argument("--output", required=True, help="CSV path")
    grid_cmd.add_argument("--png", help="Heat map path (1-D predictor and response only)")

    hmap_cmd = commands.add_parser("hmap", help="Export the hMAP partition tree")
    _common(hmap_cmd)
    hmap_cmd.add_argument("model")
    hmap_cmd.add_argument("--output", required=True, help="JSON path")
    hmap_cmd.add_argument("--svg", help="Schematic path (defaults next to the JSON)")

    test_cmd = commands.add_parser("test", help="Permutation test of independence")
    _common(test_cmd)
    test_cmd.add_argument("input")
    test_cmd.add_argument("--permutations", type=int, default=None)
    test_cmd.add_argument("--direction", default=None)
    test_cmd.add_argument("--output", required=True, help="JSON path")

    sim_cmd = commands.add_parser("simulate", help="Write a simulated dataset")
    _common(sim_cmd)
    sim_cmd.add_argument("scenario", choices=SCENARIOS)
    sim_cmd.add_argument("--n", type=int, required=True)
    sim_cmd.add_argument("--output", required=True, help="CSV path")
    sim_cmd.add_argument("--write-config", help="Also write a matching config file")

    logp_cmd = commands.add_parser("logp", help="Log predictive score of a held-out CSV")
    _common(logp_cmd)
    logp_cmd.add_argument("model")
    logp_cmd.add_argument("input")
    return parser


def _config(args: argparse.Namespace, **extra: Any) -> RunConfig:
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.threads is not None:
        overrides["threads"] = str(args.threads)
    for key, value in extra.items():
        if value is not None:
            overrides[key] = str(value)
    return load_config(args.config, overrides)


def _emit(result: dict[str, Any]) -> None:
    print(json.dumps(result, separators=(",", ":"), allow_nan=False))


def _model_columns(space: SampleSpace) -> list[ColumnSpec]:
    columns = []
    for j, name in enumerate(space.names):
        dim = space.dims[j]
        if space.is_continuous(j):
            columns.append(ColumnSpec(name, lo=dim.lo, hi=dim.hi))  # type: ignore[union-attr]
        else:
            columns.append(ColumnSpec(name, BINARY))
    return columns


def cmd_fit(args: argparse.Namespace) -> int:
    config = _config(args)
    config.require_columns()
    data = read_csv(args.input, config.predictors, config.responses)
    space_x = resolve_space(config.predictors, data.x)
    space_y = resolve_space(config.responses, data.y)
    tree = fit(space_x, space_y, config.prior(), data, threads=config.threads)
    save_model(tree, args.output)
    root = tree.root
    _emit(
        {
            "ok": True,
            "n": data.n,
            "rho_post_root": root.rho_post,
            "log_phi_root": root.log_phi,
            "wall_seconds": tree.stats["wall_seconds"],
            "nodes": tree.stats["nodes"],
        }
    )
    return EXIT_OK


def _parse_point(text: str, dims: int) -> list[float]:
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError as error:
        raise DataError(f"unparsable predictor point {text!r}") from error
    if len(values) != dims:
        raise DataError(f"predictor point {text!r} needs {dims} coordinates")
    return values


def density_grid(tree: PosteriorTree, xs: np.ndarray, resolution: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Densities (len(xs), cells) over the response grid, the grid, and its cell volume."""
    ys, volume = tree.space_y.grid(resolution)
    pairs_x = np.repeat(xs, ys.shape[0], axis=0)
    pairs_y = np.tile(ys, (xs.shape[0], 1))
    values = predict_density(tree, pairs_x, pairs_y).reshape(xs.shape[0], ys.shape[0])
    return values, ys, volume


def cmd_grid(args: argparse.Namespace) -> int:
    config = _config(args)
    tree = load_model(args.model)
    if args.x:
        xs = np.array([_parse_point(text, len(tree.space_x)) for text in args.x], dtype=float)
        xs = tree.space_x.validate(xs, label="grid predictor")
    else:
        if args.x_resolution < 1:
            raise ConfigError("x-resolution must be positive")
        cells = tree.space_x.grid_size(args.x_resolution)
        if cells > MAX_GRID_CELLS:
            raise ConfigError(f"predictor grid would have {cells} cells (limit {MAX_GRID_CELLS}); pass --x points instead")
        xs, _ = tree.space_x.grid(args.x_resolution)
    resolution = args.y_resolution or config.grid_resolution
    if resolution < 1:
        raise ConfigError("y-resolution must be positive")
    values, ys, volume = density_grid(tree, xs, resolution)
    header = list(tree.space_x.names) + list(tree.space_y.names) + ["density"]
    rows = (
        list(xs[i]) + list(ys[k]) + [values[i, k]]
        for i in range(xs.shape[0])
        for k in range(ys.shape[0])
    )
    atomic_write_text(args.output, format_rows(header, rows))
    if args.png:
        if len(tree.space_x) != 1 or len(tree.space_y) != 1:
            raise ConfigError("--png needs a 1-D predictor and a 1-D response")
        density_png(args.png, values)
    _emit({"ok": True, "rows": int(values.size), "integrals": (values.sum(axis=1) * volume).tolist()})
    return EXIT_OK


def cmd_hmap(args: argparse.Namespace) -> int:
    config = _config(args)
    tree = load_model(args.model)
    summary = hmap(tree)
    inclusion = inclusion_probabilities(tree, config.draws, generator(config.seed))
    payload = {**summary.to_dict(), "inclusion": inclusion.tolist(), "draws": config.draws}
    atomic_write_text(args.output, json.dumps(payload, indent=2, allow_nan=False) + "\n")
    svg_path = args.svg or str(Path(args.output).with_suffix(".svg"))
    drawn = hmap_svg(summary, tree.space_x, svg_path)
    _emit(
        {
            "ok": True,
            "leaves": len(summary.leaves()),
            "split_dims": sorted(summary.split_dims()),
            "inclusion": inclusion.tolist(),
            "svg": svg_path if drawn else None,
        }
    )
    return EXIT_OK


def cmd_test(args: argparse.Namespace) -> int:
    config = _config(args, permutations=args.permutations, direction=args.direction)
    config.require_columns()
    data = read_csv(args.input, config.predictors, config.responses)
    result = independence_test(
        data,
        config.prior(),
        config.permutations,
        generator(config.seed),
        config.direction,
        space_x=resolve_space(config.predictors, data.x),
        space_y=resolve_space(config.responses, data.y),
        threads=config.threads,
    )
    payload = result.to_dict()
    atomic_write_text(args.output, json.dumps(payload, indent=2, allow_nan=False) + "\n")
    _emit({"ok": True, **{k: payload[k] for k in ("direction", "stat_observed", "p_value", "bayes_factor")}})
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    config = _config(args)
    try:
        scenario = Scenario(args.scenario, args.n, config.seed)
    except ValueError as error:
        raise ConfigError(str(error)) from error
    data = simulate(scenario)
    write_csv(args.output, data)
    if args.write_config:
        atomic_write_text(args.write_config, scenario_config(scenario.name))
    _emit({"ok": True, "scenario": scenario.name, "n": data.n, "seed": scenario.seed})
    return EXIT_OK


def cmd_logp(args: argparse.Namespace) -> int:
    tree = load_model(args.model)
    data = read_csv(args.input, _model_columns(tree.space_x), _model_columns(tree.space_y))
    _emit({"ok": True, "n": data.n, "log_p": log_predictive_score(tree, data)})
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "grid": cmd_grid,
    "hmap": cmd_hmap,
    "test": cmd_test,
    "simulate": cmd_simulate,
    "logp": cmd_logp,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = "WARNING"
    try:
        level = _config(args).log_level
    except Exception:  # reported again by the command itself
        pass
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except Exception as error:
        code = exit_code_for(error)
        logger.error("%s", error, exc_info=logger.isEnabledFor(logging.DEBUG))
        return code


if __name__ == "__main__":
    raise SystemExit(main())
