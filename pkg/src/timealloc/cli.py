"""Command-line pipeline.

Subcommands: ingest, synth, agents run, fit, compare, shift-test,
rag run, rag compare, report.  Every command writes its resolved
configuration (all seeds explicit) plus the tool version beside its
outputs, so a run can be replayed byte-for-byte in network-free modes.

Exit codes: 1 usage, 2 data problem, 3 estimator non-convergence,
4 transport failure.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import asdict

import click
import numpy as np
import pandas as pd

from . import __version__, alignment, rag, shifts, svg, synth
from . import agents as agents_mod
from . import estimator as est_mod
from . import ingest as ingest_mod
from .fileio import atomic_write_df, atomic_write_json, atomic_write_text
from .model import ACTIVITIES, FEATURES, ModelError

click.UsageError.exit_code = 1

EXIT_DATA = 2
EXIT_CONVERGENCE = 3
EXIT_TRANSPORT = 4

_DATA_ERRORS = (
    ingest_mod.IngestError,
    est_mod.DataError,
    ModelError,
    synth.SynthError,
    shifts.ShiftError,
    rag.RagError,
    alignment.AlignmentError,
    agents_mod.PersonaError,
    est_mod.BootstrapError,
    FileNotFoundError,
    KeyError,
    json.JSONDecodeError,
)


def _fail(code: int, kind: str, exc: Exception):
    click.echo(f"error: {kind}: {exc}", err=True)
    sys.exit(code)


def _guard(fn):
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except agents_mod.TransportError as exc:
            _fail(EXIT_TRANSPORT, "transport", exc)
        except _DATA_ERRORS as exc:
            _fail(EXIT_DATA, "data", exc)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _write_run_config(out_dir, command: str, params: dict) -> None:
    doc = {"tool": "timealloc", "version": __version__, "command": command}
    doc.update(params)
    atomic_write_json(os.path.join(out_dir, "run_config.json"), doc)


def _load_theta(obj) -> np.ndarray:
    return np.asarray(obj, dtype=float)


@click.group()
@click.version_option(version=__version__)
def main():
    """Structural time-allocation toolkit."""


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------


@main.command("ingest")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--header-map", type=click.Path(exists=True), default=None,
              help="JSON mapping of canonical field -> CSV column name.")
@click.option("--delimiter", default=",", show_default=True)
@_guard
def cmd_ingest(input_path, out_dir, header_map, delimiter):
    """Clean a raw survey extract into the canonical records schema."""
    hmap = None
    if header_map:
        with open(header_map, encoding="utf-8") as f:
            hmap = json.load(f)
    raw = ingest_mod.read_raw_csv(input_path, header_map=hmap, delimiter=delimiter)
    clean, rejections = ingest_mod.clean_dataframe(raw)
    if len(clean) < 2:
        raise ingest_mod.IngestError(
            f"only {len(clean)} rows survived cleaning; cannot standardize"
        )
    params = ingest_mod.fit_standardization(clean)
    clean = ingest_mod.apply_standardization(clean, params)
    os.makedirs(out_dir, exist_ok=True)
    ingest_mod.write_clean_csv(os.path.join(out_dir, "clean.csv"), clean)
    ingest_mod.write_rejections_csv(os.path.join(out_dir, "rejections.csv"), rejections)
    ingest_mod.write_standardization_json(
        os.path.join(out_dir, "standardization.json"), params
    )
    atomic_write_df(os.path.join(out_dir, "summary.csv"), ingest_mod.summarize(clean))
    funnel = ingest_mod.funnel_counts(raw, clean, rejections)
    atomic_write_json(os.path.join(out_dir, "funnel.json"), funnel)
    _write_run_config(
        out_dir,
        "ingest",
        {
            "input": os.path.abspath(input_path),
            "header_map": hmap or {},
            "delimiter": delimiter,
        },
    )
    click.echo(json.dumps(funnel))


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


@main.command("synth")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True),
              help="JSON: {population: {...}, theta_star: [[...]], noise: {...}, allocation_seed: int}")
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--n", type=int, default=None, help="Override population size.")
@click.option("--seed", type=int, default=None, help="Override population seed.")
@_guard
def cmd_synth(config_path, out_dir, n, seed):
    """Generate a synthetic dataset from a known ground truth."""
    with open(config_path, encoding="utf-8") as f:
        doc = json.load(f)
    pop_kwargs = dict(doc.get("population", {}))
    for key in ("edu_probs", "spouse_probs", "race_probs", "age_bounds"):
        if key in pop_kwargs:
            pop_kwargs[key] = tuple(pop_kwargs[key])
    if n is not None:
        pop_kwargs["n"] = n
    if seed is not None:
        pop_kwargs["seed"] = seed
    cfg = synth.PopulationConfig(**pop_kwargs)
    theta_star = _load_theta(doc["theta_star"])
    noise = synth.NoiseConfig(**doc.get("noise", {}))
    alloc_seed = int(doc.get("allocation_seed", 0))
    model_form = doc.get("model_form", "softmax")
    pop = synth.generate_population(cfg)
    data = synth.simulate_allocations(
        theta_star, pop, noise=noise, seed=alloc_seed, form=model_form
    )
    os.makedirs(out_dir, exist_ok=True)
    ingest_mod.write_clean_csv(os.path.join(out_dir, "synthetic.csv"), data)
    meta = synth.dataset_metadata(cfg, theta_star, noise, alloc_seed, form=model_form)
    synth.write_metadata_json(os.path.join(out_dir, "metadata.json"), meta)
    _write_run_config(out_dir, "synth", meta)
    click.echo(f"wrote {len(data)} records to {os.path.join(out_dir, 'synthetic.csv')}")


# ---------------------------------------------------------------------------
# agents
# ---------------------------------------------------------------------------


def _build_agent(doc: dict, cache_dir):
    if "mock" in doc:
        m = doc["mock"]
        return agents_mod.MockAgent(
            theta=_load_theta(m["theta"]),
            noise=m.get("noise", "none"),
            kappa=float(m.get("kappa", 1000.0)),
            seed=int(m.get("seed", 0)),
            rag_theta=_load_theta(m["rag_theta"]) if "rag_theta" in m else None,
        )
    cfg = agents_mod.AgentConfig(**doc)
    cache = agents_mod.ResponseCache(cache_dir) if cache_dir else None
    return agents_mod.HttpAgent(cfg, cache=cache)


def _run_agent_batch(data_path, agent_config_path, cache_dir, out_dir, augment=None,
                     extra_config=None):
    df = ingest_mod.load_clean_csv(data_path)
    with open(agent_config_path, encoding="utf-8") as f:
        doc = json.load(f)
    agent = _build_agent(doc, cache_dir)
    os.makedirs(out_dir, exist_ok=True)
    decisions, attrition = agents_mod.run_batch(
        df, agent, index_csv=os.path.join(out_dir, "index.csv"), augment=augment
    )
    ingest_mod.write_clean_csv(os.path.join(out_dir, "decisions.csv"), decisions)
    atomic_write_df(os.path.join(out_dir, "attrition.csv"), attrition)
    params = {
        "data": os.path.abspath(data_path),
        "agent_config": doc,
        "cache_dir": os.path.abspath(cache_dir) if cache_dir else None,
    }
    params.update(extra_config or {})
    _write_run_config(out_dir, "agents-run", params)
    click.echo(
        f"decisions: {len(decisions)} parsed, {len(attrition)} dropped "
        f"-> {os.path.join(out_dir, 'decisions.csv')}"
    )


@main.group("agents")
def agents_group():
    """Query decision-making agents over a persona dataset."""


@agents_group.command("run")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--agent-config", required=True, type=click.Path(exists=True),
              help="JSON AgentConfig, or {\"mock\": {theta, noise, kappa, seed}}.")
@click.option("--cache-dir", type=click.Path(), default=None)
@click.option("--out-dir", required=True, type=click.Path())
@_guard
def cmd_agents_run(data_path, agent_config, cache_dir, out_dir):
    """Collect one allocation decision per record."""
    _run_agent_batch(data_path, agent_config, cache_dir, out_dir)


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def _parse_features(text):
    if not text:
        return FEATURES
    names = tuple(s.strip() for s in text.split(",") if s.strip())
    unknown = [n for n in names if n not in FEATURES]
    if unknown:
        raise est_mod.DataError(f"unknown features: {unknown}")
    return names


@main.command("fit")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--ols", is_flag=True, help="Also fit the reduced-form OLS baseline.")
@click.option("--bootstrap", "bootstrap_b", type=int, default=0,
              help="Bootstrap replicates for percentile intervals (>= 100).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--features", "features_text", default=None,
              help="Comma-separated feature subset (default: all).")
@click.option("--multi-start", is_flag=True, help="5 extra perturbed starts.")
@click.option("--truth", "truth_path", type=click.Path(exists=True), default=None,
              help="Synthetic metadata JSON; prints mean |estimate - truth|.")
@_guard
def cmd_fit(data_path, out_dir, ols, bootstrap_b, seed, features_text, multi_start,
            truth_path):
    """Estimate the structural coefficients (and optionally OLS) from a dataset."""
    df = ingest_mod.load_clean_csv(data_path)
    features = _parse_features(features_text)
    opts = est_mod.FitOptions(features=features, seed=seed, multi_start=multi_start)
    fit = est_mod.fit_structural(df, opts)
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(os.path.join(out_dir, "fit_structural.json"), fit.to_json() + "\n")
    if ols:
        ols_fit = est_mod.fit_ols(df, features=features)
        atomic_write_text(os.path.join(out_dir, "fit_ols.json"), ols_fit.to_json() + "\n")
    if bootstrap_b:
        boot = est_mod.bootstrap_ci(df, opts, B=bootstrap_b, seed=seed)
        atomic_write_json(
            os.path.join(out_dir, "bootstrap_ci.json"),
            {
                "kind": "bootstrap_ci",
                "features": list(boot.features),
                "ci_low": boot.ci_low.tolist(),
                "ci_high": boot.ci_high.tolist(),
                "n_replicates": boot.n_replicates,
                "n_failures": boot.n_failures,
                "seed": seed,
            },
        )
    _write_run_config(
        out_dir,
        "fit",
        {
            "data": os.path.abspath(data_path),
            "features": list(features),
            "seed": seed,
            "ols": ols,
            "bootstrap": bootstrap_b,
            "multi_start": multi_start,
            "truth": os.path.abspath(truth_path) if truth_path else None,
        },
    )
    status = f"converged={fit.converged} iterations={fit.iterations} sse={fit.sse:.6g}"
    if truth_path:
        with open(truth_path, encoding="utf-8") as f:
            truth = _load_theta(json.load(f)["theta_star"])
        if features == FEATURES:
            mad = float(np.abs(fit.theta - truth).mean())
            status += f" mad_vs_truth={mad:.3e}"
        else:
            status += " mad_vs_truth=n/a (feature subset)"
    click.echo(status)
    if not fit.converged:
        _fail(EXIT_CONVERGENCE, "convergence",
              RuntimeError(f"fit did not converge in {fit.iterations} iterations"))


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


def _load_fit(path) -> est_mod.FitResult:
    with open(path, encoding="utf-8") as f:
        return est_mod.FitResult.from_json(f.read())


@main.command("compare")
@click.option("--human", "human_path", required=True, type=click.Path(exists=True))
@click.option("--model", "model_specs", multiple=True, required=True,
              help="label=path/to/fit_structural.json (repeatable).")
@click.option("--out-dir", required=True, type=click.Path())
@_guard
def cmd_compare(human_path, model_specs, out_dir):
    """Alignment diagnostics of model fits against the human baseline."""
    human = _load_fit(human_path)
    models = {}
    for spec in model_specs:
        if "=" not in spec:
            raise click.UsageError(f"--model expects label=path, got {spec!r}")
        label, path = spec.split("=", 1)
        models[label] = _load_fit(path)
    report = alignment.build_alignment_report(human, models)
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(
        os.path.join(out_dir, "alignment_report.json"), report.to_json() + "\n"
    )
    for name, table in alignment.report_tables(report).items():
        atomic_write_df(os.path.join(out_dir, f"{name}.csv"), table)
    _write_run_config(
        out_dir,
        "compare",
        {
            "human": os.path.abspath(human_path),
            "models": {
                s.split("=", 1)[0]: os.path.abspath(s.split("=", 1)[1])
                for s in model_specs
            },
        },
    )
    click.echo(json.dumps(report.model_divergence))


# ---------------------------------------------------------------------------
# shift-test
# ---------------------------------------------------------------------------

_SHIFT_ALIASES = {
    "earnings": "earnings_quantile_lift",
    "age": "age_band_shift",
    "race": "race_mix",
    "spouse": "spouse_mix",
}


@main.command("shift-test")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--shifts", "shifts_text", default="all", show_default=True,
              help="Comma-separated subset of earnings,age,race,spouse.")
@click.option("--spec-file", "spec_file", type=click.Path(exists=True), default=None,
              help="JSON list of full shift specs (overrides --shifts).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--refit-standardization", is_flag=True,
              help="Re-fit z-score moments after the shift (default: baseline moments).")
@click.option("--features", "features_text", default=None)
@_guard
def cmd_shift_test(data_path, out_dir, shifts_text, spec_file, seed,
                   refit_standardization, features_text):
    """Drift of structural vs OLS estimates under counterfactual shifts."""
    df = ingest_mod.load_clean_csv(data_path)
    features = _parse_features(features_text)
    if spec_file:
        with open(spec_file, encoding="utf-8") as f:
            raw_specs = json.load(f)
        specs = []
        for doc in raw_specs:
            doc = dict(doc)
            doc.setdefault("seed", seed)
            for key in ("age_band", "spouse_age_range", "age_band_cuts"):
                if key in doc:
                    doc[key] = tuple(doc[key])
            spec = shifts.ShiftSpec(**doc)
            spec.validate()
            specs.append(spec)
        kinds = [s.kind for s in specs]
    else:
        if shifts_text.strip() == "all":
            kinds = list(shifts.SHIFT_KINDS)
        else:
            kinds = []
            for tok in shifts_text.split(","):
                tok = tok.strip()
                kinds.append(_SHIFT_ALIASES.get(tok, tok))
        specs = []
        for kind in kinds:
            spec = shifts.ShiftSpec(kind=kind, seed=seed)
            spec.validate()
            specs.append(spec)
    opts = est_mod.FitOptions(features=features, seed=seed)
    reports = shifts.run_invariance(
        df, specs, options=opts, refit_standardization=refit_standardization
    )
    os.makedirs(out_dir, exist_ok=True)
    long = pd.DataFrame([asdict(r) for r in reports])
    atomic_write_df(os.path.join(out_dir, "drift_reports.csv"), long)
    atomic_write_df(os.path.join(out_dir, "drift_table.csv"), shifts.drift_table(reports))
    baseline_params = ingest_mod.fit_standardization(df)
    for spec in specs:
        shifted = shifts.apply_shift(df, spec)
        # written z-scores match what the drift run estimated on
        params = (
            ingest_mod.fit_standardization(shifted)
            if refit_standardization
            else baseline_params
        )
        shifted = ingest_mod.apply_standardization(shifted, params)
        ingest_mod.write_clean_csv(
            os.path.join(out_dir, f"shifted_{spec.kind}.csv"), shifted
        )
        shifts.write_shift_provenance(
            os.path.join(out_dir, f"shifted_{spec.kind}.provenance.json"), spec
        )
    _write_run_config(
        out_dir,
        "shift-test",
        {
            "data": os.path.abspath(data_path),
            "shifts": kinds,
            "seed": seed,
            "refit_standardization": refit_standardization,
            "features": list(features),
        },
    )
    click.echo(shifts.drift_table(reports).to_string(index=False))


# ---------------------------------------------------------------------------
# rag
# ---------------------------------------------------------------------------


@main.group("rag")
def rag_group():
    """Retrieval-augmented mitigation loop."""


@rag_group.command("run")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--kb", "kb_paths", multiple=True, required=True, type=click.Path(exists=True))
@click.option("--agent-config", required=True, type=click.Path(exists=True))
@click.option("--cache-dir", type=click.Path(), default=None)
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--k", type=int, default=3, show_default=True)
@click.option("--embedder", "embedder_kind", type=click.Choice(["mock", "http"]),
              default="mock", show_default=True)
@click.option("--embed-endpoint", default=None)
@click.option("--embed-model", default=None)
@click.option("--embed-cache-dir", type=click.Path(), default=None)
@_guard
def cmd_rag_run(data_path, kb_paths, agent_config, cache_dir, out_dir, k,
                embedder_kind, embed_endpoint, embed_model, embed_cache_dir):
    """Query the agent with retrieval-augmented prompts."""
    kb = []
    for path in kb_paths:
        kb.extend(rag.load_kb(path))
    if embedder_kind == "http":
        if not embed_endpoint or not embed_model:
            raise click.UsageError("http embedder requires --embed-endpoint and --embed-model")
        embedder = rag.HttpEmbedder(
            embed_endpoint, embed_model, cache_dir=embed_cache_dir
        )
    else:
        embedder = rag.MockEmbedder()
    augment = rag.make_augmenter(kb, embedder, k=k)
    _run_agent_batch(
        data_path,
        agent_config,
        cache_dir,
        out_dir,
        augment=augment,
        extra_config={
            "kb": [os.path.abspath(p) for p in kb_paths],
            "k": k,
            "embedder": embedder_kind,
            "embed_endpoint": embed_endpoint,
            "embed_model": embed_model,
        },
    )


@rag_group.command("compare")
@click.option("--human", "human_path", required=True, type=click.Path(exists=True))
@click.option("--pre", "pre_path", required=True, type=click.Path(exists=True))
@click.option("--post", "post_path", required=True, type=click.Path(exists=True))
@click.option("--features", "features_text", required=True,
              help="Comma-separated features to report (e.g. race_black,spouse_present).")
@click.option("--out-dir", required=True, type=click.Path())
@_guard
def cmd_rag_compare(human_path, pre_path, post_path, features_text, out_dir):
    """Pre vs post mitigation attribute-activity cosines."""
    human = _load_fit(human_path)
    pre = _load_fit(pre_path)
    post = _load_fit(post_path)
    features = _parse_features(features_text)
    table = rag.rag_compare_table(human, pre, post, features)
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_df(os.path.join(out_dir, "rag_compare.csv"), table)
    _write_run_config(
        out_dir,
        "rag-compare",
        {
            "human": os.path.abspath(human_path),
            "pre": os.path.abspath(pre_path),
            "post": os.path.abspath(post_path),
            "features": list(features),
        },
    )
    click.echo(table.to_string(index=False))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@main.command("report")
@click.option("--in-dir", "in_dir", required=True, type=click.Path(exists=True))
@click.option("--out-dir", required=True, type=click.Path())
@_guard
def cmd_report(in_dir, out_dir):
    """Human-readable summary plus SVG renderings of emitted tables."""
    os.makedirs(out_dir, exist_ok=True)
    lines = ["# Run summary", ""]
    wrote_any = False

    alignment_path = os.path.join(in_dir, "alignment_report.json")
    if os.path.exists(alignment_path):
        with open(alignment_path, encoding="utf-8") as f:
            report = alignment.AlignmentReport.from_json(f.read())
        models = list(report.models)
        acts = list(ACTIVITIES[:3])
        matrix = [
            [report.activity_cosine[m][a] for a in acts] for m in models
        ]
        atomic_write_text(
            os.path.join(out_dir, "activity_cosine.svg"),
            svg.heatmap_svg(matrix, models, acts, title="Coefficient cosine by activity"),
        )
        ranking = report.attribute_ranking().head(8)
        atomic_write_text(
            os.path.join(out_dir, "attribute_divergence.svg"),
            svg.grouped_bars_svg(
                [f"{r.activity}:{r.feature}" for r in ranking.itertuples()],
                ["mean |deviation|"],
                [[r.mean_abs_deviation] for r in ranking.itertuples()],
                title="Largest coefficient deviations",
            ),
        )
        lines += ["## Alignment", "", "Model divergence (mean |deviation|):"]
        for m, v in report.model_divergence.items():
            lines.append(f"- {m}: {v:.4f}")
        lines.append("")
        wrote_any = True

    drift_path = os.path.join(in_dir, "drift_table.csv")
    if os.path.exists(drift_path):
        table = pd.read_csv(drift_path)
        metrics = ("mad", "rel_l2", "one_minus_cos")
        estimators = sorted(
            {c.rsplit("_", 1)[1] for c in table.columns if c.startswith("mad_")}
        )
        for metric in metrics:
            cols = [f"{metric}_{e}" for e in estimators if f"{metric}_{e}" in table.columns]
            if not cols:
                continue
            atomic_write_text(
                os.path.join(out_dir, f"drift_{metric}.svg"),
                svg.grouped_bars_svg(
                    list(table["shift"]),
                    [c.rsplit("_", 1)[1] for c in cols],
                    table[cols].to_numpy().tolist(),
                    title=f"Estimate drift under shifts: {metric}",
                ),
            )
        lines += ["## Shift invariance", "", table.to_string(index=False), ""]
        wrote_any = True

    rag_path = os.path.join(in_dir, "rag_compare.csv")
    if os.path.exists(rag_path):
        table = pd.read_csv(rag_path)
        lines += ["## Mitigation", "", table.to_string(index=False), ""]
        wrote_any = True

    if not wrote_any:
        raise ingest_mod.IngestError(f"no known outputs found under {in_dir}")
    atomic_write_text(os.path.join(out_dir, "summary.md"), "\n".join(lines) + "\n")
    _write_run_config(out_dir, "report", {"in_dir": os.path.abspath(in_dir)})
    click.echo(f"report written to {out_dir}")


if __name__ == "__main__":
    main()
