"""Objective evaluation: linear probes over embedding dumps, group cosine
reports, deterministic 2-D projection, and a diffusion-math oracle report.

Everything here is a pure function of its inputs plus an explicit seed,
so reports are reproducible and diff-able across runs.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import train_test_split

from . import diffusion as diff
from .corpus import Corpus
from .emotion import orthogonal_projection_loss, pairwise_cosine_stats
from .training import TrainState


def linear_probe(embeddings: np.ndarray, labels, split_seed: int = 0) -> float:
    """Held-out accuracy of a logistic linear classifier (80/20 split)."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if embeddings.ndim != 2 or embeddings.shape[0] != labels.shape[0]:
        raise ValueError("embeddings must be (N, D) with one label per row")
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("linear probe needs at least 2 classes")
    x_train, x_test, y_train, y_test = train_test_split(
        embeddings, labels, test_size=0.2, random_state=split_seed, stratify=labels
    )
    clf = LogisticRegression(max_iter=2000)
    clf.fit(x_train, y_train)
    return float(clf.score(x_test, y_test))


def cosine_report(embeddings_by_group: dict) -> dict:
    """Mean pairwise cosine between (and within) groups of embeddings.

    Within a group, self-pairs are excluded. Returns a nested dict keyed
    by group name, symmetric with unit diagonal for identical members.
    """
    units = {}
    for name, vectors in embeddings_by_group.items():
        v = np.asarray(vectors, dtype=np.float64)
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError(f"group {name!r} contains a zero-norm embedding")
        units[name] = v / norms
    names = list(units)
    report: dict[str, dict[str, float]] = {g: {} for g in names}
    for i, g1 in enumerate(names):
        for g2 in names[i:]:
            cos = units[g1] @ units[g2].T
            if g1 == g2:
                n = cos.shape[0]
                if n < 2:
                    value = 1.0
                else:
                    mask = ~np.eye(n, dtype=bool)
                    value = float(cos[mask].mean())
            else:
                value = float(cos.mean())
            report[g1][g2] = value
            report[g2][g1] = value
    return report


def project_2d(embeddings: np.ndarray) -> np.ndarray:
    """Principal-component projection onto the two top variance axes.

    Deterministic: component signs are fixed by making each component's
    largest-magnitude loading positive.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("embeddings must be a nonempty (N, D) matrix")
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    k = min(2, vt.shape[0])
    components = vt[:k]
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    coords = centered @ components.T
    if k < 2:
        coords = np.pad(coords, ((0, 0), (0, 2 - k)))
    return coords


def opl_structure_report(embeddings, labels) -> dict:
    """E_same / E_diff / loss of a labelled embedding set."""
    emb_t = torch.as_tensor(np.asarray(embeddings, dtype=np.float64))
    lab_t = torch.as_tensor(np.asarray(labels))
    e_same, e_diff = pairwise_cosine_stats(emb_t, lab_t)
    loss = orthogonal_projection_loss(emb_t, lab_t)
    return {
        "E_same": None if e_same is None else float(e_same),
        "E_diff": None if e_diff is None else float(e_diff),
        "L_opl": float(loss),
    }


def diffusion_oracle_report(
    schedule: diff.DiffusionSchedule,
    n_paths: int = 50000,
    n_samples: int = 5000,
    ode_steps: int = 200,
    seed: int = 0,
) -> dict:
    """Bundle of closed-form diffusion checks.

    * forward: sample moments of the closed-form marginal vs. analytic
      values, at mid and terminal times;
    * true_score_loss: the score loss with the analytic conditional score
      plugged in (must vanish);
    * ode: reverse-ODE recovery of a Gaussian toy distribution using the
      analytic marginal score.
    """
    gen = torch.Generator().manual_seed(seed)
    x0_val, mu_val = 2.0, 0.0
    forward = {"t": [], "mean_abs_error": [], "var_rel_error": []}
    for t in (0.5, 1.0):
        x0 = torch.full((n_paths,), x0_val, dtype=torch.float64)
        mu = torch.full((n_paths,), mu_val, dtype=torch.float64)
        xt = diff.forward_marginal(schedule, x0, mu, t, gen)
        decay = float(torch.exp(-0.5 * schedule.cumulative(t)))
        true_mean = mu_val + (x0_val - mu_val) * decay
        true_var = float(schedule.lam(t))
        forward["t"].append(t)
        forward["mean_abs_error"].append(abs(float(xt.mean()) - true_mean))
        forward["var_rel_error"].append(abs(float(xt.var()) / true_var - 1.0))

    b = 64
    x0 = torch.full((b, 4, 4), x0_val, dtype=torch.float64)
    mu = torch.zeros_like(x0)

    def true_score(xt, t):
        return diff.true_conditional_score(schedule, xt, x0, mu, t)

    zero_loss = float(diff.diffusion_loss(
        None, schedule, x0, mu, None, None, generator=gen, score_fn=true_score
    ))

    data_mean, data_std = 1.0, 0.6
    mu_flat = torch.zeros(n_samples, dtype=torch.float64)

    def marginal_score(x, t):
        gamma = float(torch.exp(-0.5 * schedule.cumulative(t)))
        var = gamma * gamma * data_std ** 2 + float(schedule.lam(t))
        mean = mu_val + (data_mean - mu_val) * gamma
        return -(x - mean) / var

    samples = diff.ode_sample(marginal_score, schedule, mu_flat, ode_steps, gen)
    ode = {
        "mean_abs_error": abs(float(samples.mean()) - data_mean),
        "var_rel_error": abs(float(samples.var()) / data_std ** 2 - 1.0),
    }
    return {
        "params": {
            "beta0": schedule.beta0, "beta1": schedule.beta1,
            "n_paths": n_paths, "n_samples": n_samples,
            "ode_steps": ode_steps, "seed": seed,
            "forward_x0": x0_val, "forward_mu": mu_val,
            "ode_data_mean": data_mean, "ode_data_std": data_std,
        },
        "forward": forward,
        "true_score_loss": zero_loss,
        "ode": ode,
    }


# ---------------------------------------------------------------------------
# Embedding dumps and whole-corpus evaluation
# ---------------------------------------------------------------------------


def compute_embeddings(state: TrainState, corpus: Corpus, split: str | None = None):
    """Run the reference encoder over (a split of) the corpus.

    Returns ``(records, matrix)`` where each record carries the utterance
    id and labels, and the matrix rows are the embeddings."""
    utts = corpus.utterances if split is None else corpus.subset(split)
    if not utts:
        raise ValueError(f"no utterances in split {split!r}")
    model = state.model
    model.eval()
    records, rows = [], []
    with torch.no_grad():
        for utt in utts:
            emb = model.ref_encoder.encode(corpus.load_mel(utt))
            records.append({
                "utterance_id": utt.id,
                "speaker_id": utt.speaker_id,
                "emotion_id": utt.emotion_id,
            })
            rows.append(emb.numpy())
    return records, np.stack(rows)


def dump_embeddings(records: list[dict], matrix: np.ndarray, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record, row in zip(records, matrix):
            out = dict(record, embedding=[float(v) for v in row])
            fh.write(json.dumps(out) + "\n")


def load_embeddings(path: str | Path):
    records, rows = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            data = json.loads(line)
            rows.append(np.asarray(data.pop("embedding"), dtype=np.float64))
            records.append(data)
    return records, np.stack(rows)


def write_projection_csv(records: list[dict], coords: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "x", "y", "speaker_id", "emotion_id"])
        for record, (x, y) in zip(records, coords):
            writer.writerow([record["utterance_id"], f"{x:.6f}", f"{y:.6f}",
                             record["speaker_id"], record["emotion_id"]])


def evaluate_corpus(state: TrainState, corpus: Corpus, out_dir: str | Path,
                    split: str = "test", split_seed: int = 0,
                    oracle_paths: int = 50000, oracle_samples: int = 5000,
                    ode_steps: int = 200) -> dict:
    """Full evaluation pass: embedding dump, probes, cosine reports,
    projection CSV and the diffusion oracle report. Returns the probe
    report and writes everything under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, matrix = compute_embeddings(state, corpus, split)
    dump_embeddings(records, matrix, out / "embeddings.jsonl")

    emotions = np.asarray([r["emotion_id"] for r in records])
    speakers = np.asarray([r["speaker_id"] for r in records])

    probe_report = {
        "split": split,
        "split_seed": split_seed,
        "n_embeddings": int(matrix.shape[0]),
        "emotion_probe_accuracy": linear_probe(matrix, emotions, split_seed),
        "speaker_probe_accuracy": linear_probe(matrix, speakers, split_seed),
        "emotion_chance": float(1.0 / np.unique(emotions).size),
        "speaker_chance": float(1.0 / np.unique(speakers).size),
    }
    # Speaker leakage measured where emotion does not determine the
    # speaker: the pooled-neutral utterances of the non-emotional speakers.
    from .corpus import NEUTRAL_N_ID
    neutral_n = emotions == NEUTRAL_N_ID
    if neutral_n.any() and np.unique(speakers[neutral_n]).size >= 2:
        probe_report["speaker_probe_accuracy_neutral_n"] = linear_probe(
            matrix[neutral_n], speakers[neutral_n], split_seed
        )
        probe_report["speaker_chance_neutral_n"] = float(
            1.0 / np.unique(speakers[neutral_n]).size
        )
    else:
        probe_report["speaker_probe_accuracy_neutral_n"] = None
        probe_report["speaker_chance_neutral_n"] = None
    (out / "probe_report.json").write_text(json.dumps(probe_report, indent=2) + "\n")

    by_emotion = {
        corpus.categories.names[e]: matrix[emotions == e]
        for e in np.unique(emotions)
    }
    by_speaker = {f"speaker_{s}": matrix[speakers == s] for s in np.unique(speakers)}
    cosine = {
        "by_emotion": cosine_report(by_emotion),
        "by_speaker": cosine_report(by_speaker),
    }
    (out / "cosine_report.json").write_text(json.dumps(cosine, indent=2) + "\n")

    (out / "opl_report.json").write_text(
        json.dumps(opl_structure_report(matrix, emotions), indent=2) + "\n"
    )

    coords = project_2d(matrix)
    write_projection_csv(records, coords, out / "projection.csv")

    oracle = diffusion_oracle_report(
        state.schedule, n_paths=oracle_paths, n_samples=oracle_samples,
        ode_steps=ode_steps, seed=split_seed,
    )
    (out / "diffusion_oracle.json").write_text(json.dumps(oracle, indent=2) + "\n")
    return probe_report
