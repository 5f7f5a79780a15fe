"""Batch stages behind the CLI. Every stage reads its inputs from, and writes to, the output directory."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import platform
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import RunConfig
from .experts import ExpertConfig, generate_experts
from .explain import default_background, dependence_data, global_importance, local_trip_attribution
from .mapmatch import UnmatchedTripError, hmm_map_match
from .metrics import evaluate, svf_distribution
from .reward import load_model, reward_forward, save_model
from .rollout import RolloutConfig, UnreachableError, rollout, shortest_path
from .solver import TrainConfig, solve_goals, train
from .trajectories import (filter_trips, load_trajectories, pad_and_mask, parse_trips,
                           save_trajectories, to_trajectory, trip_stats)
from .world import (SynthConfig, generate_synthetic_world, load_world, save_world)

log = logging.getLogger(__name__)

# files whose digest ignores a volatile column
_VOLATILE_COLUMNS = {"history.csv": "wall_time_ms"}


class MissingInputError(FileNotFoundError):
    pass


def file_digest(path) -> str:
    path = Path(path)
    data = path.read_bytes()
    column = _VOLATILE_COLUMNS.get(path.name)
    if column:
        rows = list(csv.reader(io.StringIO(data.decode())))
        k = rows[0].index(column)
        data = "\n".join(",".join(r[:k] + r[k + 1:]) for r in rows).encode()
    return hashlib.sha256(data).hexdigest()


class Stage:
    def __init__(self, name: str, config: RunConfig):
        self.name = name
        self.config = config
        self.out = Path(config.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, str] = {}
        self.written: set[str] = set()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False

    def input(self, name: str) -> Path:
        path = self.out / name
        if not path.exists():
            raise MissingInputError(f"stage '{self.name}' needs {path}; run the upstream stage first")
        self.inputs[name] = file_digest(path)
        return path

    def external_input(self, path) -> Path:
        path = Path(path)
        self.inputs[str(path)] = file_digest(path)
        return path

    def output(self, name: str) -> Path:
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def finish(self, **summary) -> dict:
        outputs = {name: file_digest(self.out / name) for name in sorted(self.written)}
        manifest = {
            "stage": self.name,
            "config_hash": self.config.digest(),
            "seed": self.config.seed,
            "versions": {"velopref": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": outputs,
            "summary": summary,
        }
        self.output(f"manifest_{self.name}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return manifest

    def wrote(self, *names):
        self.written.update(names)


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x: float) -> str:
    return repr(float(x))


def _load_world(stage: Stage):
    return load_world(stage.input("world.json"))


# ---------------------------------------------------------------------------

def cmd_gen_world(config: RunConfig) -> dict:
    with Stage("gen-world", config) as st:
        wo = config.world
        if wo.source == "file":
            world = load_world(st.external_input(wo.path))
            planted = None
        else:
            world, planted = generate_synthetic_world(SynthConfig(
                wo.rows, wo.cols, wo.blocked_fraction, wo.feature_dim, wo.planted_weights,
                config.component_seed("world"), wo.smoothing, wo.cell_size))
        save_world(world, st.output("world.json"))
        st.wrote("world.json")
        if planted is not None:
            rows = [(s, *world.cell_of(s), _fmt(planted[s])) for s in range(world.n_states)]
            _write_csv(st.output("planted_rewards.csv"), ["state_id", "row", "col", "planted_reward"], rows)
            st.wrote("planted_rewards.csv")
        return st.finish(states=world.n_states, feature_dim=world.feature_dim)


def _read_planted(path: Path) -> np.ndarray:
    with path.open() as fh:
        return np.array([float(r["planted_reward"]) for r in csv.DictReader(fh)])


def _ingest_raw(config: RunConfig, world, path) -> tuple[list, dict]:
    parsed = parse_trips(path, config.trajectories.format)
    kept, report = filter_trips(parsed.trips, config.filter)
    trajs, unmatched = [], 0
    for trip in sorted(kept, key=lambda t: t.order_id):
        try:
            match = hmm_map_match(trip.points, world, config.matching)
        except UnmatchedTripError:
            unmatched += 1
            continue
        trajs.append(to_trajectory(match.cells, world, order_id=trip.order_id,
                                   start_time=trip.start_time, end_time=trip.end_time))
    trajs, seg_report = filter_trips(trajs, config.filter)
    for k, v in seg_report.items():
        report[k] = report.get(k, 0) + v
    report["unmatched"] = unmatched
    report["parse_errors"] = [list(e) for e in parsed.errors]
    return trajs, dict(sorted(report.items()))


def cmd_gen_experts(config: RunConfig) -> dict:
    with Stage("gen-experts", config) as st:
        world = _load_world(st)
        to = config.trajectories
        info: dict = {}
        if to.source == "synthetic":
            planted = _read_planted(st.input("planted_rewards.csv"))
            ec = ExpertConfig(to.n_trips, to.n_od_pairs, to.n_heldout, to.reward_scale, to.step_cost,
                              config.train.gamma, to.min_od_cells, to.max_steps,
                              config.component_seed("experts"))
            if to.n_trips == 0:
                warnings.warn("trajectories.n_trips is 0; writing an empty expert file")
            train_t, held, modes, info = generate_experts(world, planted, ec)
            save_trajectories(modes, world, st.output("heldout_modes.json"))
            st.wrote("heldout_modes.json")
        else:
            src = st.external_input(to.path)
            if to.source == "file":
                trajs = load_trajectories(src, world)
                trajs, info["rejections"] = filter_trips(trajs, config.filter)
            else:
                trajs, info["rejections"] = _ingest_raw(config, world, src)
            rng = np.random.default_rng(config.component_seed("split"))
            order = rng.permutation(len(trajs))
            n_held = int(round(to.heldout_fraction * len(trajs)))
            held = [trajs[i] for i in sorted(order[:n_held])]
            train_t = [trajs[i] for i in sorted(order[n_held:])]
            st.output("rejections.json").write_text(json.dumps(info["rejections"], indent=2, sort_keys=True))
            st.wrote("rejections.json")
        save_trajectories(train_t, world, st.output("experts.json"))
        save_trajectories(held, world, st.output("heldout.json"))
        st.wrote("experts.json", "heldout.json")
        return st.finish(trips=len(train_t), heldout=len(held),
                         rejected_od_draws=info.get("rejected_od_draws", 0))


def _train_config(config: RunConfig) -> TrainConfig:
    return TrainConfig(seed=config.component_seed("train"), **asdict(config.train))


def cmd_train(config: RunConfig) -> dict:
    with Stage("train", config) as st:
        world = _load_world(st)
        trajs = load_trajectories(st.input("experts.json"), world)
        if not trajs:
            raise ValueError("no expert trajectories to train on")
        batch = pad_and_mask(trajs, world)
        model, history = train(world, batch, _train_config(config))
        save_model(model, st.output("model.json"))
        cols = ["epoch", "log_likelihood", "grad_norm", "mean_residual", "wall_time_ms"]
        _write_csv(st.output("history.csv"), cols,
                   [[r["epoch"]] + [_fmt(r[c]) for c in cols[1:-1]] + [f"{r['wall_time_ms']:.1f}"]
                    for r in history.rows])
        st.wrote("model.json", "history.csv")
        return st.finish(epochs=len(history.rows) - 1,
                         final_log_likelihood=history.rows[-1]["log_likelihood"])


def _learned_solutions(config: RunConfig, world, model, goals):
    rewards = reward_forward(model, world.features)
    c = config.train
    sols = solve_goals(world, rewards, sorted(set(goals)), c.gamma, c.tol, c.max_vi_iter, c.vi_method)
    return rewards, {s.goal: s for s in sols}


def cmd_rollout(config: RunConfig) -> dict:
    """Paired mode: one (real, synthetic, shortest) triple per held-out trip."""
    with Stage("rollout", config) as st:
        world = _load_world(st)
        model = load_model(st.input("model.json"))
        held = load_trajectories(st.input("heldout.json"), world)
        held = [t for t in held if t.origin != t.destination]
        _, sols = _learned_solutions(config, world, model, [t.destination for t in held])
        rc = RolloutConfig(config.rollout.mode, config.rollout.max_steps, config.component_seed("rollout"))
        syn, sp, unreachable = [], [], 0
        kept = []
        for i, real in enumerate(held):
            try:
                path = shortest_path(world, real.origin, real.destination)
            except UnreachableError:
                unreachable += 1
                continue
            s = rollout(world, sols[real.destination], real.origin, rc, index=i)
            s.order_id = path.order_id = real.order_id
            kept.append(real)
            syn.append(s)
            sp.append(path)
        save_trajectories(kept, world, st.output("paired_real.json"))
        save_trajectories(syn, world, st.output("paired_synthetic.json"))
        save_trajectories(sp, world, st.output("paired_shortest.json"))
        st.wrote("paired_real.json", "paired_synthetic.json", "paired_shortest.json")
        return st.finish(pairs=len(kept), unterminated=sum(not s.terminated for s in syn),
                         unreachable=unreachable)


def cmd_evaluate(config: RunConfig) -> dict:
    with Stage("evaluate", config) as st:
        world = _load_world(st)
        model = load_model(st.input("model.json"))
        real = load_trajectories(st.input("paired_real.json"), world)
        syn = load_trajectories(st.input("paired_synthetic.json"), world)
        sp = load_trajectories(st.input("paired_shortest.json"), world)
        rewards = reward_forward(model, world.features)
        report, rows = evaluate(list(zip(real, syn, sp)), world, rewards,
                                config.metrics.include_nonterminated)
        st.output("eval_report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        _write_csv(st.output("cpc_pairs.csv"), list(rows[0]) if rows else [],
                   [[r[k] for k in rows[0]] for r in rows])
        terminated = [t for t in zip(real, syn, sp) if config.metrics.include_nonterminated or t[1].terminated]
        dists = [svf_distribution([t[k] for t in terminated], world) for k in range(3)]
        _write_csv(st.output("svf_histograms.csv"), ["state_id", "row", "col", "real", "synthetic", "shortest"],
                   [(s, *world.cell_of(s), *(_fmt(d[s]) for d in dists)) for s in range(world.n_states)])
        st.wrote("eval_report.json", "cpc_pairs.csv", "svf_histograms.csv")
        return st.finish(jsd=report.jsd, mean_cpc_synthetic=report.mean_cpc_synthetic,
                         mean_cpc_shortest=report.mean_cpc_shortest)


def cmd_explain(config: RunConfig, threads: int = 1) -> dict:
    with Stage("explain", config) as st:
        world = _load_world(st)
        model = load_model(st.input("model.json"))
        eo = config.explain
        seed = config.component_seed("explain")
        background = default_background(world, eo.background_size, seed)
        gi = global_importance(model, world.features, background, eo.budget, seed, threads)
        rows = gi.table(world.features, [world.cell_id(s) for s in range(world.n_states)])
        _write_csv(st.output("phi.csv"), list(rows[0]), [[r[k] for k in rows[0]] for r in rows])
        names = eo.feature_names or [f"f{j}" for j in range(world.feature_dim)]
        written = ["phi.csv"]
        for j in range(world.feature_dim):
            name = f"dependence/feature_{j:02d}.csv"
            _write_csv(st.output(name), ["x", "x_z", "phi"],
                       [tuple(_fmt(v) for v in p) for p in dependence_data(gi.phi, world.features, j)])
            written.append(name)
        summary = {
            "method": gi.method,
            "baseline": gi.baseline,
            "ranking": [names[j] for j in gi.ranking],
            "mean_abs_phi": {names[j]: float(gi.mean_abs[j]) for j in range(world.feature_dim)},
        }
        if eo.feature_groups:
            summary["group_mean_abs_phi"] = gi.group_summary(eo.feature_groups)
        st.output("importance.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        written.append("importance.json")
        held_path = st.out / "heldout.json"
        if eo.local_trips > 0 and held_path.exists():
            trips = load_trajectories(st.input("heldout.json"), world)[:eo.local_trips]
            local = []
            for t in trips:
                for step, rep in enumerate(local_trip_attribution(model, t, world, background, eo.budget, seed)):
                    r, c = world.cell_of(rep.instance)
                    for j, phi in enumerate(rep.phi):
                        local.append((t.order_id, step, world.cell_id(rep.instance), r, c, j, _fmt(phi)))
            _write_csv(st.output("local_attributions.csv"),
                       ["order_id", "step", "state_id", "row", "col", "feature_id", "phi"], local)
            written.append("local_attributions.csv")
        st.wrote(*written)
        return st.finish(top_feature=summary["ranking"][0])


def cmd_trip_stats(config: RunConfig) -> dict:
    with Stage("trip-stats", config) as st:
        world = _load_world(st)
        trajs = load_trajectories(st.input("experts.json"), world)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            stats = trip_stats(trajs, world)
        st.output("trip_stats.json").write_text(json.dumps(stats.to_dict(), indent=2, sort_keys=True))
        _write_csv(st.output("trip_stats.csv"), ["order_id", "label", "manhattan_m", "log10_distance"],
                   [(t.order_id, lab, _fmt(m), "" if lg is None else _fmt(lg))
                    for t, lab, m, lg in zip(trajs, stats.labels, stats.manhattan_m, stats.log10_distance)])
        st.wrote("trip_stats.json", "trip_stats.csv")
        return st.finish(trips=len(trajs), zero_distance_trips=stats.zero_distance_trips)


STAGES = {
    "gen-world": cmd_gen_world,
    "gen-experts": cmd_gen_experts,
    "train": cmd_train,
    "rollout": cmd_rollout,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "trip-stats": cmd_trip_stats,
}
