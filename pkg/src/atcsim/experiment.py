"""Experiment orchestration and analysis artifacts.

:class:`Experiment` holds the corpus, the clients and the server and runs the
stages step by step, so a run can be branched after the Assign stage (for
example to compare contrastive weights on identical starting points).
:func:`run_experiment` is the one-call entry point.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from . import protocol as P
from .config import ExperimentConfig, dump_config
from .corpus import build_corpus
from .evaluation import MetricReport, aggregate_scores, evaluate_client
from .tensor import RngStream

ABLATION_TAGS = {
    "atc": "full",
    "atc_no_assign": "without_assign",
    "atc_no_contrast": "without_contrast",
    "fedavg": "baseline",
    "isolated": "baseline",
}


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: list[MetricReport]
    aggregate: dict[str, float]
    metric_rows: list[tuple]
    round_logs: list[dict]
    cooccurrence: np.ndarray
    neighbor_freq: np.ndarray
    rank_rows: list[tuple]
    audit: list[str]
    bytes_sent: int
    analysis: dict = field(default_factory=dict)
    experiment: Experiment | None = None


class Experiment:
    def __init__(self, cfg: ExperimentConfig, datasets=None):
        self.cfg = cfg
        mcfg = cfg.model
        if datasets is None:
            datasets = build_corpus(
                plan=cfg.plan,
                sizes=(cfg.n_train, cfg.n_val, cfg.n_test),
                seed=cfg.seed,
                num_classes=cfg.num_classes,
                max_len=cfg.max_seq_len,
            )
        self.datasets = sorted(datasets, key=lambda d: d.client_id)
        root = RngStream(cfg.seed, "experiment")
        backbone = M.select(M.init_model(mcfg, root.child("init")), M.BACKBONE)
        self.clients = []
        for ds in self.datasets:
            own = M.init_model(mcfg, root.child("client", ds.client_id, "init"), ds.task_kind)
            params = {**{k: v.copy() for k, v in backbone.items()}, **M.select(own, M.PRIVATE)}
            self.clients.append(P.Client(ds, params, cfg, root.child("client", ds.client_id, "train")))
        sizes = {c.id: c.num_samples for c in self.clients}
        self.server = P.Server(cfg, backbone, sizes)
        self.metric_rows: list[tuple] = []
        self.final_reports: list[MetricReport] = []
        self.assign_done = False
        self.switched = False

    # -- staging -------------------------------------------------------------

    def branch(self, **changes) -> Experiment:
        """Deep copy with config fields replaced (e.g. ``contrast_weight=0``)."""
        other = copy.deepcopy(self)
        other.cfg = self.cfg.replace(**changes)
        other.server.cfg = other.cfg
        for c in other.clients:
            c.cfg = other.cfg
        return other

    def _after_round(self) -> None:
        every = self.cfg.eval_every
        t = self.server.round
        if every and t % every == 0:
            self.evaluate("val", t)
        ck = self.cfg.checkpoint_every
        if ck and self.cfg.out_dir and t % ck == 0:
            self.save_checkpoints(Path(self.cfg.out_dir) / "checkpoints")

    def run_assign_stage(self) -> None:
        if self.assign_done:
            return
        schedule = self.cfg.task_schedule
        if self.cfg.mode in ("atc", "atc_no_contrast"):
            for r in range(self.cfg.assign_rounds):
                P.run_assign_round(self.server, self.clients, schedule[r % len(schedule)])
                self._after_round()
        self.assign_done = True

    def switch(self) -> None:
        """Stage switch between Assign and the second stage."""
        self.run_assign_stage()
        if self.switched:
            return
        mode = self.cfg.mode
        if mode in ("atc", "atc_no_assign"):
            P.start_contrast(self.server, self.clients)
        elif mode == "atc_no_contrast":
            # vanilla FedAvg from here on: one shared encoder
            self._unify(("encoder",))
            P.broadcast(self.server, self.clients, M.BACKBONE, P.FEDAVG)
        self.switched = True

    def _unify(self, regions) -> None:
        srv = self.server
        shared = P.aggregate_groups(
            {0: M.select(srv.weights[0], regions)},
            [P.ModelUpdate(n, srv.round, P.FEDAVG, {k: v - srv.weights[0][k] for k, v in M.select(w, regions).items()}, srv.sizes[n])
             for n, w in sorted(srv.weights.items())],
            {0: sorted(srv.weights)},
        )[0]
        for n in srv.weights:
            srv.weights[n].update({k: v.copy() for k, v in shared.items()})

    def run_second_stage(self) -> None:
        self.switch()
        mode = self.cfg.mode
        for _ in range(self.cfg.contrast_rounds):
            if mode in ("atc", "atc_no_assign"):
                P.run_contrast_round(self.server, self.clients)
            elif mode == "atc_no_contrast":
                P.run_fedavg_round(self.server, self.clients, regions=("encoder",))
            elif mode == "fedavg":
                P.run_fedavg_round(self.server, self.clients)
            else:
                P.run_isolated_round(self.server, self.clients)
            self._after_round()

    def run(self) -> ExperimentResult:
        self.run_assign_stage()
        self.switch()
        self.run_second_stage()
        self.final_reports = self.evaluate("test", self.server.round)
        return self.result()

    # -- evaluation and analysis --------------------------------------------

    def _load_broadcast(self) -> None:
        """Clients pick up their latest server-side backbone before evaluation."""
        if self.cfg.mode == "isolated":
            return
        mode = self.cfg.mode
        regions = ("encoder",) if self.switched and mode != "fedavg" else M.BACKBONE
        for c in self.clients:
            c.load(M.select(self.server.weights[c.id], regions))

    def evaluate(self, split: str, round_index: int) -> list[MetricReport]:
        self._load_broadcast()
        reports = []
        for c in self.clients:
            r = evaluate_client(c.params, c.mcfg, c.dataset, split, round_index)
            reports.append(r)
            for name, value in sorted(r.metrics.items()):
                self.metric_rows.append((round_index, c.id, c.kind, f"{split}.{name}", value))
        return reports

    def cooccurrence(self) -> np.ndarray:
        return cooccurrence_matrix(self.server.cluster_history, len(self.clients))

    def neighbor_frequency(self) -> np.ndarray:
        n = len(self.clients)
        freq = np.zeros((n, n))
        for a in self.server.neighbor_history:
            for i, pos in a.positives.items():
                for j in pos:
                    freq[i, j] += 1
        return freq

    def rank_rows(self) -> list[tuple]:
        kinds = [c.kind for c in self.clients]
        rows = []
        for a in self.server.neighbor_history:
            for i in sorted(a.ranking):
                for rank, j in enumerate(a.ranking[i]):
                    sim = float(a.similarity[i, j]) if a.similarity is not None else 0.0
                    rows.append((a.round, i, rank, j, int(kinds[i] == kinds[j]), int(j in a.positives[i]), sim))
        return rows

    def analysis(self) -> dict:
        out = {}
        domains = [c.dataset.domain_id for c in self.clients]
        kinds = [c.kind for c in self.clients]
        if self.server.cluster_history:
            labels = modal_clusters(self.server.cluster_history, len(self.clients), self.cfg.n_clusters)
            out["modal_clusters"] = labels
            out["domain_purity"] = cluster_purity(labels, domains)
        if self.server.neighbor_history:
            out["same_kind_fraction"] = same_kind_fraction(self.server.neighbor_history, kinds)
        return out

    def result(self) -> ExperimentResult:
        reports = self.final_reports
        return ExperimentResult(
            config=self.cfg,
            reports=reports,
            aggregate=aggregate_scores(reports) if reports else {},
            metric_rows=list(self.metric_rows),
            round_logs=list(self.server.logs),
            cooccurrence=self.cooccurrence(),
            neighbor_freq=self.neighbor_frequency(),
            rank_rows=self.rank_rows(),
            audit=P.audit_messages(self.server.channel.messages) + round_log_violations(self.server.logs, self.cfg),
            bytes_sent=self.server.channel.bytes_sent,
            analysis=self.analysis(),
            experiment=self,
        )

    def save_checkpoints(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for c in self.clients:
            M.save_checkpoint(c.params, directory / f"client{c.id}.round{self.server.round}.ckpt")


# -- analysis helpers --------------------------------------------------------


def cooccurrence_matrix(history, n: int) -> np.ndarray:
    """Each round adds ``1/|C|`` to every pair inside a cluster ``C`` (diagonal included).

    Rows therefore sum to the number of rounds.
    """
    mat = np.zeros((n, n))
    for a in history:
        for c in sorted(set(a.labels)):
            members = a.members(c)
            for i in members:
                for j in members:
                    mat[i, j] += 1.0 / len(members)
    return mat


def coclustering_frequency(history, n: int) -> np.ndarray:
    """Fraction of rounds in which each pair shared a cluster."""
    freq = np.zeros((n, n))
    for a in history:
        lab = np.asarray(a.labels)
        freq += lab[:, None] == lab[None, :]
    return freq / max(len(history), 1)


def modal_clusters(history, n: int, n_clusters: int) -> list[int]:
    """Consensus partition: average linkage on ``1 - co-clustering frequency``."""
    freq = coclustering_frequency(history, n)
    return P.dense_labels(P.agglomerative_average(1.0 - freq, min(n_clusters, n)), n)


def cluster_purity(labels, classes) -> float:
    """Fraction of items whose cluster's majority class equals their own class."""
    total = 0
    for c in set(labels):
        members = [classes[i] for i, l in enumerate(labels) if l == c]
        total += max(members.count(k) for k in set(members))
    return total / len(labels)


def same_kind_fraction(history, kinds, last_frac: float = 0.5) -> float:
    """Mean share of same-task-kind peers among positives over the last rounds."""
    if not history:
        return float("nan")
    start = int(len(history) * (1 - last_frac))
    vals = []
    for a in history[start:]:
        for i, pos in sorted(a.positives.items()):
            vals.append(np.mean([kinds[j] == kinds[i] for j in pos]))
    return float(np.mean(vals))


def round_log_violations(logs, cfg: ExperimentConfig) -> list[str]:
    problems = []
    for entry in logs:
        t = entry["round"]
        for n, w in entry.get("weights", {}).items():
            if abs(sum(w.values()) - 1.0) > 1e-12:
                problems.append(f"round {t}: aggregation weights of client {n} sum to {sum(w.values())!r}")
        if entry["stage"] == P.CONTRAST:
            for n, pos in entry["neighbors"].items():
                if len(pos) != cfg.k or int(n) in pos or len(set(pos)) != len(pos):
                    problems.append(f"round {t}: bad positives {pos} for client {n}")
        if entry["stage"] == P.ASSIGN:
            labels = entry["clusters"]
            if sorted(set(labels)) != list(range(len(set(labels)))):
                problems.append(f"round {t}: cluster ids are not dense")
    return problems


# -- artifacts ---------------------------------------------------------------


def _matrix_csv(mat: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n = mat.shape[0]
    w.writerow(["client", *range(n)])
    for i in range(n):
        w.writerow([i, *(repr(float(v)) for v in mat[i])])
    return buf.getvalue()


def _rows_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


METRIC_HEADER = ("round", "client", "task", "metric", "value")
RANK_HEADER = ("round", "client", "rank", "neighbor", "same_kind", "positive", "similarity")


def build_report(result: ExperimentResult) -> dict:
    cfg = result.config
    exp = result.experiment
    clients = []
    for r in result.reports:
        ds = exp.datasets[r.client_id] if exp is not None else None
        clients.append({
            "client": r.client_id,
            "task": r.task_kind,
            "domain": ds.domain_id if ds is not None else None,
            "metrics": dict(sorted(r.metrics.items())),
            "primary": r.primary,
        })
    return {
        "mode": cfg.mode,
        "ablation": ABLATION_TAGS[cfg.mode],
        "seed": cfg.seed,
        "preset": cfg.preset,
        "clients": clients,
        "aggregate": result.aggregate,
        "bytes_exchanged": result.bytes_sent,
        "audit_violations": result.audit,
        "analysis": result.analysis,
    }


def write_artifacts(result: ExperimentResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(_rows_csv(METRIC_HEADER, result.metric_rows))
    (out / "rounds.jsonl").write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in result.round_logs))
    (out / "cooccurrence.csv").write_text(_matrix_csv(result.cooccurrence))
    (out / "neighbors.csv").write_text(_matrix_csv(result.neighbor_freq))
    (out / "neighbor_ranks.csv").write_text(_rows_csv(RANK_HEADER, result.rank_rows))
    (out / "report.json").write_text(json.dumps(build_report(result), indent=2, sort_keys=True) + "\n")
    (out / "resolved_config.txt").write_text(dump_config(result.config))
    meta = {
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    (out / "metadata.json").write_text(json.dumps(meta, indent=2) + "\n")
    return out


def run_experiment(cfg: ExperimentConfig, datasets=None, write: bool = True) -> ExperimentResult:
    """Run all stages for ``cfg.mode`` and, if ``cfg.out_dir`` is set, write artifacts."""
    result = Experiment(cfg, datasets).run()
    if write and cfg.out_dir:
        write_artifacts(result, cfg.out_dir)
        if cfg.checkpoint_every:
            result.experiment.save_checkpoints(Path(cfg.out_dir) / "checkpoints")
    return result
