"""Experiment orchestration: dataset preparation, collaborative-inference
emulation, budget / distance / target-accuracy sweeps, and CSV metrics.

Every stochastic choice derives from the experiment seed through labeled
RngStreams, so a (config, seed) pair fully determines every output byte.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import channel as ch
from . import corpus, scheduler
from . import tensor as T
from .checkpoint import FORMAT_VERSION, load_embeddings
from .config import ExperimentSpec, config_hash, spec_to_text
from .moe import (MoEConfig, MoEModel, TrainTrace, active_set, aggregate,
                  evaluate, train_model)
from .predictor import (ImportancePredictor, PredictorConfig, collect_dataset,
                        train_predictor)
from .rng import RngStream


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.10g}"
    return str(x)


def write_csv(path: str, header: list, rows: list):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_manifest(out_dir: str, spec: ExperimentSpec, artifacts: list):
    path = os.path.join(out_dir, "run-manifest.txt")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"config_sha256 = {config_hash(spec)}\n")
        fh.write(f"seed = {spec.seed}\n")
        fh.write(f"checkpoint_format_version = {FORMAT_VERSION}\n")
        for a in artifacts:
            fh.write(f"artifact = {a}\n")


def write_gnuplot_stub(out_dir: str, csv_name: str, xlabel: str, ylabel: str):
    stem = os.path.splitext(csv_name)[0]
    path = os.path.join(out_dir, stem + ".gp")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("set datafile separator ','\n")
        fh.write(f"set xlabel '{xlabel}'\nset ylabel '{ylabel}'\nset key autotitle columnhead\n")
        fh.write(f"plot '{csv_name}' using 1:2 with linespoints\n")


# -- dataset preparation ---------------------------------------------------

@dataclass
class DataBundle:
    train: list           # (TokenSequence, label)
    test: list
    vocab: corpus.Vocabulary
    num_classes: int


def _sequences(examples, vocab, max_len):
    out = []
    for ex in examples:
        seq = corpus.mask_privacy(corpus.tokenize(ex.text, vocab, max_len))
        out.append((seq, ex.label))
    return out


def prepare_data(spec: ExperimentSpec) -> DataBundle:
    d = spec.data
    if d.source == "csv":
        train_ex, test_ex, vocab, num_classes = corpus.load_dataset(d.csv_train, d.csv_test)
    elif d.source == "synthetic":
        rng = RngStream(spec.seed, "data/synthetic")
        train_ex = corpus.synth_generate(rng.spawn("train"), d.synth_train,
                                         d.synth_classes, d.synth_sensitive_rate)
        test_ex = corpus.synth_generate(rng.spawn("test"), d.synth_test,
                                        d.synth_classes, d.synth_sensitive_rate)
        vocab = corpus.build_vocabulary(train_ex)
        num_classes = d.synth_classes
    else:
        raise ValueError(f"unknown data source: {d.source}")
    return DataBundle(
        train=_sequences(train_ex, vocab, d.max_len),
        test=_sequences(test_ex, vocab, d.max_len),
        vocab=vocab,
        num_classes=num_classes,
    )


def build_model(spec: ExperimentSpec, bundle: DataBundle) -> MoEModel:
    m = spec.model
    cfg = MoEConfig(
        vocab_size=len(bundle.vocab), num_classes=bundle.num_classes, d=m.d,
        num_experts=m.experts, num_privacy_experts=m.privacy_experts,
        expert_hidden=m.expert_hidden, tau=m.tau, lambda_lb=m.lambda_lb,
        learning_rate=m.learning_rate, momentum=m.momentum, epochs=m.epochs,
        batch_size=m.batch_size, use_layernorm=m.use_layernorm,
    )
    model = MoEModel(cfg, RngStream(spec.seed, "model"))
    if m.embedding_import:
        emb = load_embeddings(m.embedding_import)
        if emb.shape != model.embedding.data.shape:
            raise ValueError(
                f"imported embeddings shape {emb.shape} != "
                f"expected {model.embedding.data.shape}"
            )
        model.embedding.data = emb
        model.embedding.requires_grad = False
    return model


def predictor_config(spec: ExperimentSpec) -> PredictorConfig:
    p = spec.predictor
    return PredictorConfig(d=spec.model.d, proj_dim=p.proj_dim, layers=p.layers,
                           heads=p.heads, learning_rate=p.learning_rate,
                           epochs=p.epochs, batch_size=p.batch_size)


# -- collaborative inference ----------------------------------------------

def collaborative_forward(model: MoEModel, seq, decision) -> np.ndarray:
    """Emulate the client / base-station split for one example.

    Sensitive tokens run through privacy experts on the "client" side,
    selected non-sensitive tokens through non-privacy experts on the "base
    station" side; outputs are merged and aggregated over the active set.
    The split is an emulation boundary only: results are numerically
    identical to the monolithic forward on the same active set.
    """
    sens = seq.sensitive_indices()
    for i in decision.selected:
        if not (0 <= i < seq.length):
            raise IndexError(f"decision index {i} out of range for length {seq.length}")
        if seq.mask[i] == 1:
            raise ValueError(f"decision selects sensitive token {i}")
    with T.no_grad():
        h = model.embed(seq)
        from .moe import apply_privacy_isolation, gate_logits, gumbel_softmax, hard_select
        g = gate_logits(h, model.w_g, model.b_g)
        g_prime = apply_privacy_isolation(g, seq.mask, model.config.num_privacy_experts)
        gamma = np.zeros((seq.length, model.config.num_experts))
        z = gumbel_softmax(g_prime, model.config.tau, gamma)
        routed, assign = hard_select(z, g_prime, gamma)
        # client side: privacy experts; base-station side: non-privacy experts
        local = model.route_hard(h, routed, assign, rows=sens)
        remote = model.route_hard(h, routed, assign, rows=decision.selected)
        h_prime = local + remote
        active = active_set(seq, decision)
        if active.size == 0:
            raise ValueError("no tokens to aggregate")
        alpha, pooled = aggregate(h_prime, model.agg_w, active)
        if model.config.use_layernorm:
            pooled = T.layer_norm(pooled, model.ln_gain, model.ln_bias)
        logits = (T.matmul(pooled, model.w_o) + model.b_o).data.reshape(-1)
    e = np.exp(logits - logits.max())
    return e / e.sum()


# -- strategy evaluation ---------------------------------------------------

def topk_provider(model: MoEModel, predictor: ImportancePredictor, budget: int):
    def provider(i, seq):
        emb = model.embedding.data[np.asarray(seq.ids)]
        scores = predictor.scores_np(emb)
        return scheduler.select_topk(scores, seq.mask, budget)
    return provider


def random_provider(budget: int, rng: RngStream):
    def provider(i, seq):
        return scheduler.select_random(seq.mask, budget, rng)
    return provider


def accuracy_at_budget(model, predictor, data, budget: int, strategy: str,
                       rng: Optional[RngStream] = None) -> float:
    if strategy == "topk":
        return evaluate(model, data, topk_provider(model, predictor, budget))
    if strategy == "random":
        if rng is None:
            raise ValueError("random strategy needs an rng")
        return evaluate(model, data, random_provider(budget, rng))
    raise ValueError(f"unknown strategy: {strategy}")


def _random_curve(model, data, budgets, trials, seed, label):
    """Mean/std accuracy per budget over independent random-selection trials."""
    means, stds = {}, {}
    for k in budgets:
        accs = []
        for t in range(trials):
            rng = RngStream(seed, f"{label}/k{k}/trial{t}")
            accs.append(accuracy_at_budget(model, None, data, k, "random", rng))
        means[k] = float(np.mean(accs))
        stds[k] = float(np.std(accs, ddof=1)) if trials > 1 else 0.0
    return means, stds


# -- experiment modes ------------------------------------------------------

def run_train(spec: ExperimentSpec, out_dir: str, log=print):
    bundle = prepare_data(spec)
    model = build_model(spec, bundle)
    trace = train_model(model, bundle.train, bundle.test, spec.seed, log=log)
    from .moe import save_model
    ckpt = os.path.join(out_dir, spec.model.checkpoint)
    save_model(model, ckpt)
    csv_path = os.path.join(out_dir, "train_metrics.csv")
    write_csv(csv_path, ["round", "accuracy", "mean_loss"],
              [(r, a, l) for r, a, l in
               zip(trace.rounds, trace.test_accuracy, trace.mean_loss)])
    write_manifest(out_dir, spec, [spec.model.checkpoint, "train_metrics.csv"])
    return model, trace


def run_train_predictor(spec: ExperimentSpec, out_dir: str, model=None, bundle=None, log=print):
    if bundle is None:
        bundle = prepare_data(spec)
    if model is None:
        from .moe import load_model
        model = load_model(os.path.join(out_dir, spec.model.checkpoint))
    records = collect_dataset(model, bundle.train)
    predictor, trace = train_predictor(records, predictor_config(spec), spec.seed, log=log)
    from .predictor import save_predictor
    save_predictor(predictor, os.path.join(out_dir, spec.predictor.checkpoint))
    csv_path = os.path.join(out_dir, "predictor_metrics.csv")
    write_csv(csv_path, ["epoch", "mean_kl"],
              list(zip(trace.epochs, trace.mean_kl)))
    write_manifest(out_dir, spec, [spec.predictor.checkpoint, "predictor_metrics.csv"])
    return predictor, trace


def run_eval(spec: ExperimentSpec, out_dir: str, model=None, bundle=None):
    if bundle is None:
        bundle = prepare_data(spec)
    if model is None:
        from .moe import load_model
        model = load_model(os.path.join(out_dir, spec.model.checkpoint))
    acc = evaluate(model, bundle.test)
    write_csv(os.path.join(out_dir, "eval_metrics.csv"),
              ["metric", "value"], [("test_accuracy", acc)])
    write_manifest(out_dir, spec, ["eval_metrics.csv"])
    return acc


def run_budget_sweep(spec: ExperimentSpec, out_dir: str, model=None,
                     predictor=None, bundle=None, emit_gnuplot=False):
    """Accuracy vs per-example uplink budget, predictor top-k vs random."""
    if bundle is None:
        bundle = prepare_data(spec)
    model, predictor = _load_artifacts(spec, out_dir, model, predictor)
    budgets = [int(k) for k in spec.sweep.budgets]
    rows = []
    for k in budgets:
        acc = accuracy_at_budget(model, predictor, bundle.test, k, "topk")
        rows.append((k, "topk", 1, acc, 0.0))
    rmeans, rstds = _random_curve(model, bundle.test, budgets, spec.sweep.trials,
                                  spec.seed, "sweep-budget/random")
    for k in budgets:
        rows.append((k, "random", spec.sweep.trials, rmeans[k], rstds[k]))
    header = ["budget", "strategy", "trials", "accuracy_mean", "accuracy_std"]
    write_csv(os.path.join(out_dir, "budget_sweep.csv"), header, rows)
    if emit_gnuplot:
        write_gnuplot_stub(out_dir, "budget_sweep.csv", "tokens uploaded", "accuracy")
    write_manifest(out_dir, spec, ["budget_sweep.csv"])
    return rows


def _max_nonsensitive(data) -> int:
    return max(len(seq.nonsensitive_indices()) for seq, _ in data)


def _strategy_curve(model, predictor, data, k_max, trials, seed, label):
    """Accuracy per budget k = 0..k_max for both strategies."""
    ks = list(range(0, k_max + 1))
    topk = {k: accuracy_at_budget(model, predictor, data, k, "topk") for k in ks}
    rmeans, _ = _random_curve(model, data, ks, trials, seed, label)
    return ks, topk, rmeans


def _min_tokens_to_peak(ks, curve) -> tuple:
    peak = max(curve[k] for k in ks)
    for k in ks:
        if curve[k] >= peak - 1e-12:
            return k, peak
    return ks[-1], peak


def run_distance_sweep(spec: ExperimentSpec, out_dir: str, model=None,
                       predictor=None, bundle=None, emit_gnuplot=False):
    """Per distance: median token budget, then the minimum budget each
    strategy needs to reach its own peak accuracy within that budget."""
    if bundle is None:
        bundle = prepare_data(spec)
    model, predictor = _load_artifacts(spec, out_dir, model, predictor)
    max_ns = _max_nonsensitive(bundle.test)
    rows = []
    for di, dist in enumerate(spec.sweep.distances):
        cspec = spec.channel
        params = ch.ChannelParams(
            f_c_ghz=cspec.f_c_ghz, d_c_m=float(dist), bandwidth_hz=cspec.bandwidth_hz,
            tx_power_dbm=cspec.tx_power_dbm, noise_psd_dbm_hz=cspec.noise_psd_dbm_hz,
            shadowing_std_db=cspec.shadowing_std_db, t_ul_s=cspec.t_ul_s,
            bits_per_token=cspec.bits_per_token or spec.model.d * cspec.bits_per_value,
        )
        rng = RngStream(spec.seed, f"sweep-distance/channel/d{di}")
        m_ul = int(np.median(ch.budget_samples(params, rng, spec.sweep.channel_draws)))
        k_max = min(m_ul, max_ns)
        ks, topk, rmeans = _strategy_curve(
            model, predictor, bundle.test, k_max, spec.sweep.trials,
            spec.seed, f"sweep-distance/random/d{di}")
        for strategy, curve in (("topk", topk), ("random", rmeans)):
            k_req, peak = _min_tokens_to_peak(ks, curve)
            rows.append((float(dist), m_ul, strategy, k_req, peak))
    header = ["distance_m", "m_ul_median", "strategy", "tokens_required", "accuracy"]
    write_csv(os.path.join(out_dir, "distance_sweep.csv"), header, rows)
    if emit_gnuplot:
        write_gnuplot_stub(out_dir, "distance_sweep.csv", "distance (m)", "tokens required")
    write_manifest(out_dir, spec, ["distance_sweep.csv"])
    return rows


def run_target_accuracy(spec: ExperimentSpec, out_dir: str, model=None,
                        predictor=None, bundle=None, emit_gnuplot=False):
    """Smallest per-example budget reaching each target accuracy."""
    if bundle is None:
        bundle = prepare_data(spec)
    model, predictor = _load_artifacts(spec, out_dir, model, predictor)
    k_max = _max_nonsensitive(bundle.test)
    ks, topk, rmeans = _strategy_curve(
        model, predictor, bundle.test, k_max, spec.sweep.trials,
        spec.seed, "target-accuracy/random")
    rows = []
    for target in spec.sweep.targets:
        for strategy, curve in (("topk", topk), ("random", rmeans)):
            k_req = next((k for k in ks if curve[k] >= float(target)), None)
            reachable = int(k_req is not None)
            if k_req is None:
                rows.append((float(target), strategy, -1, 0, -1.0, -1.0))
            else:
                mean_used = float(np.mean(
                    [min(k_req, len(seq.nonsensitive_indices()))
                     for seq, _ in bundle.test]))
                rows.append((float(target), strategy, k_req, reachable,
                             mean_used, curve[k_req]))
    header = ["target", "strategy", "tokens_required", "reachable",
              "mean_tokens_used", "accuracy"]
    write_csv(os.path.join(out_dir, "target_accuracy.csv"), header, rows)
    if emit_gnuplot:
        write_gnuplot_stub(out_dir, "target_accuracy.csv", "target accuracy", "tokens required")
    write_manifest(out_dir, spec, ["target_accuracy.csv"])
    return rows


def run_channel_probe(spec: ExperimentSpec, out=print):
    params = spec.channel.params(spec.model.d)
    rng = RngStream(spec.seed, "channel-probe")
    real = ch.draw_realization(params, rng, deterministic=spec.channel.deterministic)
    snr_db = 10.0 * np.log10(real.snr) if real.snr > 0 else float("-inf")
    out(f"path_loss_db = {real.pl_db:.4f}")
    out(f"shadowing_psi = {real.psi:.6g}")
    out(f"fading_chi = {real.chi:.6g}")
    out(f"snr_db = {snr_db:.4f}")
    out(f"rate_bps = {real.rate_bps:.6g}")
    out(f"m_ul = {real.m_ul}")
    return real


def _load_artifacts(spec, out_dir, model, predictor):
    if model is None:
        from .moe import load_model
        model = load_model(os.path.join(out_dir, spec.model.checkpoint))
    if predictor is None:
        from .predictor import load_predictor
        predictor = load_predictor(os.path.join(out_dir, spec.predictor.checkpoint))
    return model, predictor
