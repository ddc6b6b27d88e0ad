"""Blocks of trials, learning curves and Table-1 style summaries.

A block runs ``n_trials`` independent trials. Every method in a trial sees the
same environment, the same initial policy parameters and the same fixed test
movements. Learning curves record the mean test cost initially and after every
``eval_every`` rollouts. Costate learners pay for their babble stage: their
curves start ``n_babble / 30`` rollouts late and stop at the shared budget.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import costate, ddpg
from .envgen import DivergenceError, Environment, TaskSpec, make_task, random_states
from .nn import MlpNet, MlpSpec, param_count

log = logging.getLogger(__name__)

SMOOTH_WINDOW = 5


# network sizing -----------------------------------------------------------


def equal_width_count(n_in: int, n_out: int, width: int, hidden_layers: int = 2) -> int:
    sizes = (n_in, *([width] * hidden_layers), n_out)
    return param_count(MlpSpec(sizes))


def solve_width(target: int, n_in: int, n_out: int, hidden_layers: int = 2) -> int:
    """Equal hidden width whose parameter count is closest to ``target``.

    Ties go to the smaller width. Raises ValueError when ``target`` is below
    the width-1 network.
    """
    smallest = equal_width_count(n_in, n_out, 1, hidden_layers)
    if target < smallest:
        raise ValueError(f"target {target} is below the minimum of {smallest} parameters for a {n_in}->{n_out} net")
    best, best_dev = 1, abs(smallest - target)
    w = 1
    while True:
        w += 1
        count = equal_width_count(n_in, n_out, w, hidden_layers)
        dev = abs(count - target)
        if dev < best_dev:
            best, best_dev = w, dev
        if count > target:
            return best


def size_policy(target_n_mu: int, n_s: int, n_a: int) -> MlpSpec:
    """4-layer tanh-output policy with equal hidden widths nearest ``target_n_mu``."""
    return MlpSpec((n_s, *[solve_width(target_n_mu, n_s, n_a)] * 2, n_a), "tanh")


@dataclass(frozen=True)
class NetworkSizes:
    policy: MlpSpec
    f_hat: MlpSpec | None = None
    cprime_hat: MlpSpec | None = None
    critic: MlpSpec | None = None

    @property
    def n_mu(self) -> int:
        return param_count(self.policy)

    @property
    def n_est(self) -> int:
        return sum(param_count(s) for s in (self.f_hat, self.cprime_hat, self.critic) if s is not None)


def size_networks(
    target_n_mu: int,
    target_n_est: int,
    n_s: int,
    n_a: int,
    family: str = "costate",
    f_layers: int = 4,
    f_share: float = 0.75,
) -> NetworkSizes:
    """Pick equal-width hidden layers that hit the parameter targets.

    ``family`` is ``"costate"`` (split between f_hat and cprime_hat),
    ``"vcf"`` (all of ``target_n_est`` to f_hat) or ``"ddpg"`` (all to the
    critic). For the costate split, any split within 1% of the target is
    acceptable and the one whose f_hat share is closest to ``f_share`` wins;
    failing that, the smallest deviation wins.
    """
    if target_n_mu <= 0 or target_n_est <= 0:
        raise ValueError("parameter targets must be positive")
    n_x = n_s + n_a
    policy = size_policy(target_n_mu, n_s, n_a)
    f_hidden = f_layers - 2
    if f_hidden < 1:
        raise ValueError("f_hat needs at least 3 layers")
    if family == "ddpg":
        return NetworkSizes(policy, critic=MlpSpec((n_x, *[solve_width(target_n_est, n_x, 1)] * 2, 1)))
    if family == "vcf":
        return NetworkSizes(policy, f_hat=MlpSpec((n_x, *[solve_width(target_n_est, n_x, n_s, f_hidden)] * f_hidden, n_s)))
    if family != "costate":
        raise ValueError(f"unknown network family {family!r}")
    min_f = equal_width_count(n_x, n_s, 1, f_hidden)
    min_c = equal_width_count(n_x, 1, 1)
    if target_n_est < min_f + min_c:
        raise ValueError(f"target n_est {target_n_est} is below the minimum of {min_f + min_c}")
    best = None
    w_f = 1
    while equal_width_count(n_x, n_s, w_f, f_hidden) + min_c <= target_n_est + min_c:
        n_f = equal_width_count(n_x, n_s, w_f, f_hidden)
        w_c = solve_width(max(target_n_est - n_f, min_c), n_x, 1)
        total = n_f + equal_width_count(n_x, 1, w_c)
        dev = abs(total - target_n_est)
        key = (dev > 0.01 * target_n_est, abs(n_f / total - f_share), dev)
        if best is None or key < best[0]:
            best = (key, w_f, w_c)
        w_f += 1
    _, w_f, w_c = best
    return NetworkSizes(
        policy,
        f_hat=MlpSpec((n_x, *[w_f] * f_hidden, n_s)),
        cprime_hat=MlpSpec((n_x, w_c, w_c, 1)),
    )


# evaluation and curves ----------------------------------------------------


def saturated_cost(env: Environment) -> float:
    """Largest possible movement cost: every cost-rate at its bound of 1."""
    return (env.n_steps + 1) * env.dt


def evaluate_policy(policy, env: Environment, test_states: np.ndarray, rng: np.random.Generator | None = None) -> float:
    """Mean movement cost of ``policy`` from each column of ``test_states``.

    Runs without learning. Noisy tasks need ``rng``. A divergent batch scores
    the saturated maximum.
    """
    s = test_states
    total = env.cost_rate(s)
    calls = env.step_calls
    try:
        for _ in range(env.n_steps):
            s = env.step(s, policy(s), rng)
            total = total + env.cost_rate(s)
    except DivergenceError:
        return saturated_cost(env)
    finally:
        # evaluation steps are not experience
        env.step_calls = calls
    return float(np.mean(env.dt * total))


def smooth(values, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Mean of each point and up to ``window - 1`` preceding points."""
    v = np.asarray(values, dtype=float)
    # direct window sums; a running cumsum would drift over long curves
    return np.array([v[max(0, i + 1 - window):i + 1].mean() for i in range(v.size)])


def babble_equivalent_shift(n_babble: int, n_m: int = 100, n_steps: int = 30) -> int:
    """Rollouts holding as many samples as the babble stage (15000 -> 500)."""
    return int(math.floor(n_babble * n_m / (n_m * n_steps) + 0.5))


@dataclass
class TrialSummary:
    c_min: float
    c_final: float


@dataclass
class LearningCurve:
    method: str
    rollouts: list[int]
    costs: list[float]
    babble_equivalent_rollouts: int = 0
    diverged: bool = False

    def smoothed(self) -> np.ndarray:
        return smooth(self.costs)

    def summary(self) -> TrialSummary:
        return smooth_and_summarize(self)

    def to_csv(self, path) -> None:
        sm = self.smoothed()
        with open(path, "w", newline="") as fh:
            fh.write(f"# method={self.method}\n")
            fh.write(f"# babble_equivalent_rollouts={self.babble_equivalent_rollouts}\n")
            fh.write(f"# diverged={int(self.diverged)}\n")
            w = csv.writer(fh)
            w.writerow(["rollout", "raw_cost", "smoothed_cost"])
            for r, c, s in zip(self.rollouts, self.costs, sm):
                w.writerow([r, repr(float(c)), repr(float(s))])

    @classmethod
    def from_csv(cls, path) -> "LearningCurve":
        meta = {}
        rows = []
        with open(path, newline="") as fh:
            for line in fh:
                if line.startswith("#"):
                    key, _, value = line[1:].strip().partition("=")
                    meta[key] = value
                elif line.strip() and not line.startswith("rollout"):
                    rows.append(next(csv.reader([line])))
        return cls(
            method=meta.get("method", Path(path).stem),
            rollouts=[int(r[0]) for r in rows],
            costs=[float(r[1]) for r in rows],
            babble_equivalent_rollouts=int(meta.get("babble_equivalent_rollouts", 0)),
            diverged=bool(int(meta.get("diverged", 0))),
        )


def smooth_and_summarize(curve: LearningCurve) -> TrialSummary:
    if not curve.costs:
        raise ValueError("cannot summarise an empty curve")
    sm = smooth(curve.costs)
    return TrialSummary(c_min=float(sm.min()), c_final=float(sm[-1]))


# configuration ------------------------------------------------------------

METHOD_FAMILIES = {"CPG": "costate", "CF": "costate", "VCF": "vcf", "DDPG": "ddpg"}


@dataclass
class MethodConfig:
    """One learner in a block. ``options`` override LearnerConfig/DdpgConfig fields."""

    name: str
    method: str
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHOD_FAMILIES:
            raise ValueError(f"unknown method {self.method!r}")


@dataclass
class RunConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    methods: list[MethodConfig] = field(default_factory=lambda: [MethodConfig(m, m) for m in ("DDPG", "CPG", "CF")])
    n_rolls: int = 2500
    n_trials: int = 10
    eval_every: int = 10
    n_test: int = 100
    master_seed: int = 0
    target_n_mu: int | None = None
    target_n_est: int | None = None
    target_n_est_ddpg: int | None = None
    target_n_est_vcf: int | None = None
    f_layers: int = 4
    output_dir: str | None = None
    n_jobs: int = 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        task = TaskSpec(**d.pop("task", {}))
        methods = d.pop("methods", None)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(task=task, **d)
        if methods is not None:
            cfg.methods = [
                MethodConfig(m, m) if isinstance(m, str) else MethodConfig(m["name"], m.get("method", m["name"]), dict(m.get("options", {})))
                for m in methods
            ]
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


# paper-sized networks, keyed by (n_s, n_C)
DEFAULT_TARGETS = {
    (10, 4): {"n_mu": 314, "costate": 4483, "ddpg": 4501, "vcf": 4483},
    (30, 4): {"n_mu": 554, "costate": 1507, "ddpg": 1528, "vcf": 1507},
    (100, 8): {"n_mu": 3124, "costate": 3661, "ddpg": 3661, "vcf": 3652},
}


def targets_for(config: RunConfig, family: str) -> tuple[int, int]:
    t = config.task
    defaults = DEFAULT_TARGETS.get((t.n_s, t.n_C))
    n_mu = config.target_n_mu or (defaults["n_mu"] if defaults else None)
    explicit = {"costate": config.target_n_est, "ddpg": config.target_n_est_ddpg, "vcf": config.target_n_est_vcf}[family]
    if explicit is None and family == "vcf":
        explicit = config.target_n_est
    n_est = explicit or (defaults[family] if defaults else None)
    if n_mu is None or n_est is None:
        raise ValueError(f"no default network sizes for n_s={t.n_s}, n_C={t.n_C}; set target_n_mu and target_n_est")
    return n_mu, n_est


# seeds --------------------------------------------------------------------


def _key(name: str) -> int:
    return zlib.crc32(name.encode())


def trial_seed(master: int, trial: int, purpose: str) -> np.random.SeedSequence:
    """Independent stream for (trial, purpose); purpose is e.g. "env" or a method name."""
    return np.random.SeedSequence(master, spawn_key=(trial, _key(purpose)))


def _rng(master, trial, purpose) -> np.random.Generator:
    return np.random.default_rng(trial_seed(master, trial, purpose))


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


# trials -------------------------------------------------------------------


@dataclass
class MethodResult:
    name: str
    method: str
    curve: LearningCurve
    summary: TrialSummary
    n_mu: int
    n_est: int
    env_steps: int = 0
    imaginary_env_steps: int = 0
    gate_rate: float = float("nan")
    error: str | None = None


@dataclass
class TrialResult:
    index: int
    task: TaskSpec
    env_fingerprint: str
    policy_fingerprint: str
    test_fingerprint: str
    initial_cost: float
    methods: dict[str, MethodResult] = field(default_factory=dict)


def trial_environment(config: RunConfig, trial: int) -> Environment:
    seed = int(trial_seed(config.master_seed, trial, "env").generate_state(1)[0])
    return make_task(dataclasses.replace(config.task, seed=seed))


def run_method(
    mc: MethodConfig,
    config: RunConfig,
    env: Environment,
    policy: MlpNet,
    test_states: np.ndarray,
    trial: int,
    checkpoint_dir: Path | None = None,
) -> MethodResult:
    family = METHOD_FAMILIES[mc.method]
    n_mu, n_est = targets_for(config, family)
    sizes = size_networks(n_mu, n_est, env.n_s, env.n_a, family, config.f_layers)
    if sizes.policy != policy.spec:
        raise ValueError(f"shared policy {policy.spec.layer_sizes} does not match {sizes.policy.layer_sizes}")
    rng = _rng(config.master_seed, trial, mc.name)
    eval_rng = _rng(config.master_seed, trial, mc.name + "/eval")
    noisy = env.spec.noise_sigma > 0

    def evaluate(p):
        return evaluate_policy(p, env, test_states, eval_rng if noisy else None)

    if mc.method == "DDPG":
        agent = ddpg.make_ddpg_agent(ddpg.DdpgConfig(**mc.options), policy, sizes.critic, rng)
        calls = env.step_calls
        rollouts, costs, diverged = ddpg.run_ddpg(agent, env, config.n_rolls, rng, evaluate, config.eval_every)
        shift = 0
        result_extra = {"env_steps": env.step_calls - calls}
        save = ddpg.save_agent
    else:
        lcfg = costate.LearnerConfig(method=mc.method, **mc.options)
        agent = costate.make_agent(lcfg, policy, sizes.f_hat, sizes.cprime_hat, rng)
        shift = babble_equivalent_shift(lcfg.n_babble, lcfg.n_m, env.n_steps)
        if shift >= config.n_rolls:
            raise ValueError(f"babble stage ({shift} rollouts) exhausts the budget of {config.n_rolls}")
        costate.babble_stage(agent, env, rng)
        run = costate.run_learning(agent, env, config.n_rolls - shift, rng, evaluate, config.eval_every)
        rollouts = [r + shift for r in run.eval_rollouts]
        costs = run.eval_costs
        diverged = run.diverged
        real = [s for s in run.stats if not s.imaginary]
        imag = [s for s in run.stats if s.imaginary]
        gates = [s.gate_rate for s in run.stats if np.isfinite(s.gate_rate)]
        result_extra = {
            "env_steps": sum(s.env_steps for s in real),
            "imaginary_env_steps": sum(s.env_steps for s in imag),
            "gate_rate": float(np.mean(gates)) if gates else float("nan"),
        }
        save = costate.save_agent
    if diverged:
        # a dead learner stays at the saturated cost for the rest of the budget
        last = rollouts[-1] if rollouts else shift
        for r in range(last + config.eval_every, config.n_rolls + 1, config.eval_every):
            rollouts.append(r)
            costs.append(saturated_cost(env))
    curve = LearningCurve(mc.name, rollouts, costs, shift, diverged)
    if checkpoint_dir is not None:
        save(checkpoint_dir / f"trial{trial:02d}_{mc.name}.npz", agent, env_extra(env))
    return MethodResult(mc.name, mc.method, curve, curve.summary(), sizes.n_mu, sizes.n_est, **result_extra)


def env_extra(env: Environment) -> dict[str, np.ndarray]:
    extra = {f"env/{k}": v for k, v in env.params.items()}
    extra["env/spec"] = np.frombuffer(json.dumps(dataclasses.asdict(env.spec)).encode(), dtype=np.uint8)
    return extra


def env_from_extra(extra: dict[str, np.ndarray]) -> Environment:
    spec = TaskSpec(**json.loads(bytes(extra["env/spec"]).decode()))
    params = {k[len("env/"):]: np.array(v) for k, v in extra.items() if k.startswith("env/") and k != "env/spec"}
    return Environment(spec, params)


def run_trial(config: RunConfig, trial: int, checkpoint_dir: Path | None = None) -> TrialResult:
    env = trial_environment(config, trial)
    n_mu, _ = targets_for(config, "costate")
    policy_spec = size_policy(n_mu, env.n_s, env.n_a)
    policy = MlpNet.init(policy_spec, _rng(config.master_seed, trial, "policy"))
    test_states = random_states(_rng(config.master_seed, trial, "test"), env.n_s, config.n_test)
    init_rng = _rng(config.master_seed, trial, "initial/eval") if env.spec.noise_sigma > 0 else None
    result = TrialResult(
        index=trial,
        task=env.spec,
        env_fingerprint=env.fingerprint()[:16],
        policy_fingerprint=_digest(policy.theta),
        test_fingerprint=_digest(test_states),
        initial_cost=evaluate_policy(policy, env, test_states, init_rng),
    )
    for mc in config.methods:
        try:
            # each method gets its own copy so step counters stay per method
            result.methods[mc.name] = run_method(mc, config, copy.deepcopy(env), policy, test_states, trial, checkpoint_dir)
        except Exception as exc:  # per-method failures are recorded, the block goes on
            log.exception("trial %d method %s failed", trial, mc.name)
            result.methods[mc.name] = MethodResult(
                mc.name, mc.method, LearningCurve(mc.name, [], []), TrialSummary(float("nan"), float("nan")), 0, 0, error=repr(exc)
            )
    return result


# blocks -------------------------------------------------------------------


@dataclass
class TableRow:
    method: str
    n_s: int
    n_c: int
    n_C: int
    n_mu: int
    n_est: int
    c_min: float
    c_final: float
    n_trials: int


@dataclass
class BlockReport:
    config: RunConfig
    trials: list[TrialResult]
    table: list[TableRow]

    def row(self, name: str) -> TableRow:
        for r in self.table:
            if r.method == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "table": [dataclasses.asdict(r) for r in self.table],
            "trials": [
                {
                    "index": t.index,
                    "task": dataclasses.asdict(t.task),
                    "env_fingerprint": t.env_fingerprint,
                    "policy_fingerprint": t.policy_fingerprint,
                    "test_fingerprint": t.test_fingerprint,
                    "initial_cost": t.initial_cost,
                    "methods": {
                        name: {
                            "c_min": m.summary.c_min,
                            "c_final": m.summary.c_final,
                            "n_mu": m.n_mu,
                            "n_est": m.n_est,
                            "env_steps": m.env_steps,
                            "imaginary_env_steps": m.imaginary_env_steps,
                            "gate_rate": m.gate_rate,
                            "babble_equivalent_rollouts": m.curve.babble_equivalent_rollouts,
                            "diverged": m.curve.diverged,
                            "error": m.error,
                        }
                        for name, m in t.methods.items()
                    },
                }
                for t in self.trials
            ],
            "notes": {
                "seeds": "per-trial streams are SeedSequence(master_seed, spawn_key=(trial, crc32(purpose)))",
                "stochastic_evaluation": "fresh noise for every evaluation, drawn from a per-method stream",
            },
        }

    def table_text(self) -> str:
        head = f"{'Method':<10}{'n_s':>5}{'n_c':>5}{'n_C':>5}{'n_mu':>7}{'n_est':>7}{'C_min':>8}{'C_final':>9}"
        lines = [head]
        for r in self.table:
            lines.append(f"{r.method:<10}{r.n_s:>5}{r.n_c:>5}{r.n_C:>5}{r.n_mu:>7}{r.n_est:>7}{r.c_min:>8.2f}{r.c_final:>9.2f}")
        return "\n".join(lines)


def summarize_block(config: RunConfig, trials: list[TrialResult]) -> list[TableRow]:
    rows = []
    t = config.task
    for mc in config.methods:
        results = [tr.methods[mc.name] for tr in trials if mc.name in tr.methods and tr.methods[mc.name].error is None]
        if results:
            c_min = float(np.mean([r.summary.c_min for r in results]))
            c_final = float(np.mean([r.summary.c_final for r in results]))
            n_mu, n_est = results[0].n_mu, results[0].n_est
        else:
            c_min = c_final = float("nan")
            n_mu = n_est = 0
        rows.append(TableRow(mc.name, t.n_s, t.n_c, t.n_C, n_mu, n_est, c_min, c_final, len(results)))
    return rows


def _run_trial_job(args):
    config, trial, ck = args
    return run_trial(config, trial, ck)


def run_block(config: RunConfig, output_dir=None) -> BlockReport:
    out = Path(output_dir or config.output_dir) if (output_dir or config.output_dir) else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config.dump(out / "config.json")
    jobs = [(config, i, out) for i in range(config.n_trials)]
    if config.n_jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(config.n_jobs) as pool:
            trials = list(pool.map(_run_trial_job, jobs))
    else:
        trials = [_run_trial_job(j) for j in jobs]
    report = BlockReport(config, trials, summarize_block(config, trials))
    if out is not None:
        write_report(report, out)
    return report


def write_report(report: BlockReport, out: Path) -> None:
    for tr in report.trials:
        for name, m in tr.methods.items():
            if m.curve.costs:
                m.curve.to_csv(out / f"trial{tr.index:02d}_{name}.csv")
    with open(out / "summary.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)


def rebuild_summary(directory) -> list[dict]:
    """Recompute per-method block means from exported curve files."""
    directory = Path(directory)
    per_method: dict[str, list[TrialSummary]] = {}
    for path in sorted(directory.glob("trial*_*.csv")):
        curve = LearningCurve.from_csv(path)
        per_method.setdefault(curve.method, []).append(curve.summary())
    return [
        {
            "method": name,
            "n_trials": len(s),
            "c_min": float(np.mean([x.c_min for x in s])),
            "c_final": float(np.mean([x.c_final for x in s])),
        }
        for name, s in per_method.items()
    ]
