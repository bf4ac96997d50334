"""Command-line orchestration: decompose, select-queries, train, forecast,
evaluate, correlate. Config is flat key=value text with dotted section
prefixes; all randomness flows from a single seed.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import datahub, decompose, evalbench, fluenet, querysel, trainer
from . import numkit as nk


class ConfigError(ValueError):
    pass


def load_config(path: str) -> dict:
    """Parse key=value lines; '#' starts a comment; keys keep dots."""
    cfg = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            cfg[key.strip()] = value.strip()
    return cfg


def _get(cfg, key, default=None, required=False):
    if key in cfg:
        return cfg[key]
    if required:
        raise ConfigError(f"missing config key {key!r}")
    return default


def _get_list(cfg, key, default=None, cast=str):
    raw = _get(cfg, key)
    if raw is None:
        return default
    return [cast(v.strip()) for v in raw.split(",") if v.strip()]


def _get_bool(cfg, key, default=False):
    raw = _get(cfg, key)
    if raw is None:
        return default
    return raw.lower() in ("1", "true", "yes", "on")


def _read_queries_file(path: str) -> list:
    """Either a selected_queries.csv (uses 'selected') or one query per line."""
    with open(path, newline="", encoding="utf-8") as f:
        first = f.readline()
        if "selected" in [c.strip() for c in first.split(",")]:
            f.seek(0)
            return [row["selected"] for row in csv.DictReader(f)]
    with open(path, encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip()]


def _prepare_country(cfg, country):
    """Load, split, decompose, normalize, and window one country's data."""
    n_in = int(_get(cfg, "model.n", 52))
    s_out = int(_get(cfg, "model.s", 5))
    series = datahub.load_ili(_get(cfg, "data.ili", required=True))[country]
    test_start = datahub.parse_week(_get(cfg, "split.test_start",
                                         required=True))
    test_len = int(_get(cfg, "split.test_len", 52))
    plan = datahub.split_plan(series, test_start, test_len)
    fit_len = plan.train[1] - series.start + 1
    d = decompose.stl_decompose(series.values[:fit_len], period=52)
    template = decompose.seasonal_template(d)
    seasonal = np.empty(len(series))
    seasonal[:fit_len] = d.seasonal
    for i in range(fit_len, len(series)):
        seasonal[i] = template.values[i % 52]

    panel, stats = None, []
    if not _get_bool(cfg, "no_queries"):
        queries = _read_queries_file(
            _get(cfg, f"queries.{country}", required=True))
        raw_panel = datahub.load_trends(
            _get(cfg, "data.trends_dir", required=True), country, queries,
            series)
        panel, stats = datahub.minmax_fit_apply(raw_panel, plan.train)

    train_w = datahub.make_windows(series, panel, seasonal, n_in, s_out,
                                   plan.train)
    val_w = datahub.make_target_windows(series, panel, seasonal, n_in,
                                        s_out, plan.val)
    test_w = datahub.make_target_windows(series, panel, seasonal, n_in,
                                         s_out, plan.test)
    return {
        "series": series, "plan": plan, "decomposition": d,
        "template": template, "seasonal": seasonal, "panel": panel,
        "norm_stats": stats, "train": train_w, "val": val_w, "test": test_w,
    }


def _countries(cfg, args):
    if getattr(args, "countries", None):
        return [c.strip() for c in args.countries.split(",")]
    lst = _get_list(cfg, "countries")
    if not lst:
        raise ConfigError("missing config key 'countries'")
    return lst


def cmd_decompose(cfg, args) -> int:
    out = args.out
    countries = _countries(cfg, args)
    all_series = datahub.load_ili(_get(cfg, "data.ili", required=True))
    for country in countries:
        series = all_series[country]
        d = decompose.stl_decompose(series.values, period=52)
        recon = d.reconstruct()
        if np.max(np.abs(recon - series.values)) > 1e-9:
            raise ConfigError(f"{country}: reconstruction identity violated")
        path = os.path.join(out, f"decomp_{country}.csv")
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["iso_week", "observed", "trend", "seasonal",
                        "remainder"])
            for i, week in enumerate(series.weeks()):
                w.writerow([datahub.format_week(week),
                            repr(float(series.values[i])),
                            repr(float(d.trend[i])),
                            repr(float(d.seasonal[i])),
                            repr(float(d.remainder[i]))])
        print(f"wrote {path}")
    return 0


def cmd_select_queries(cfg, args) -> int:
    english = _read_queries_file(_get(cfg, "querysel.english_queries",
                                      required=True))
    out_path = os.path.join(args.out, "selected_queries.csv")
    if args.method == "mapping":
        selected = querysel.translation_select(
            _get(cfg, "querysel.mapping", required=True), english)
        cands = [querysel.QueryCandidate(english=e, candidate=s,
                                         theta_w=float("nan"),
                                         theta_t=float("nan"))
                 for e, s in zip(english, selected)]
        querysel.write_selected(out_path, cands)
        print(f"wrote {out_path}")
        return 0

    source = querysel.load_embeddings(
        _get(cfg, "querysel.source_embeddings", required=True), "source")
    target = querysel.load_embeddings(
        _get(cfg, "querysel.target_embeddings", required=True), "target")
    stopwords = set()
    for key in ("querysel.source_stopwords", "querysel.target_stopwords"):
        path = _get(cfg, key)
        if path:
            stopwords |= querysel.load_stopwords(path)
    country = _get(cfg, "querysel.country", required=True)
    series = datahub.load_ili(_get(cfg, "data.ili", required=True))[country]
    test_start = datahub.parse_week(_get(cfg, "split.test_start",
                                         required=True))
    plan = datahub.split_plan(series, test_start,
                              int(_get(cfg, "split.test_len", 52)))
    fit_len = plan.train[1] - series.start + 1
    ili_train = series.values[:fit_len]
    cand_dir = _get(cfg, "querysel.candidates_dir", required=True)

    def provider(candidate):
        path = os.path.join(cand_dir, datahub.query_slug(candidate) + ".csv")
        if not os.path.exists(path):
            return None
        by_week = {}
        with open(path, newline="", encoding="utf-8") as f:
            for row in csv.DictReader(f):
                idx = datahub.parse_week(row["iso_week"])
                if idx >= 0:
                    by_week[idx] = float(row["value"])
        vals, last = np.zeros(fit_len), 0.0
        for i, week in enumerate(series.weeks()[:fit_len]):
            if week in by_week:
                last = by_week[week]
            vals[i] = last
        return vals

    selected = querysel.wt_select(
        english, source, target, provider, ili_train,
        k=int(_get(cfg, "querysel.k", 100)), stopwords=stopwords)
    querysel.write_selected(out_path, selected)
    print(f"wrote {out_path}")
    return 0


def _train_config(cfg, args, countries, mode) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        countries=countries,
        n_in=int(_get(cfg, "model.n", 52)),
        s_out=int(_get(cfg, "model.s", 5)),
        lr_grid=tuple(_get_list(cfg, "train.lr_grid",
                                [0.001, 0.01, 0.1, 1.0], float)),
        m_grid=tuple(_get_list(cfg, "train.m_grid", [8, 16, 32, 64], int)),
        max_epochs=int(_get(cfg, "train.max_epochs", 300)),
        patience=int(_get(cfg, "train.patience", 20)),
        batch_size=int(_get(cfg, "train.batch_size", 32)),
        seed=args.seed if args.seed is not None
        else int(_get(cfg, "seed", 0)),
        mode=mode,
        use_queries=not (args.no_queries or _get_bool(cfg, "no_queries")),
        use_country_embedding=not (args.no_country_embedding
                                   or _get_bool(cfg, "no_country_embedding")),
        standard_gru=_get_bool(cfg, "standard_gru"),
        arch=_get(cfg, "model.arch", "proposed"))


def cmd_train(cfg, args) -> int:
    countries = _countries(cfg, args)
    mode = args.mode or _get(cfg, "mode", "single")
    tc = _train_config(cfg, args, countries, mode)
    if tc.use_queries is False:
        cfg = dict(cfg)
        cfg["no_queries"] = "true"
    prepared = {c: _prepare_country(cfg, c) for c in countries}
    data = {c: {"train": p["train"], "val": p["val"]}
            for c, p in prepared.items()}
    model, log = trainer.fit(tc, data)
    extra = {"term": _get(cfg, "term", ""), "mode": mode}
    for c, p in prepared.items():
        extra[f"template.{c}"] = [float(f"{v:.17g}")
                                  for v in p["template"].values]
        extra[f"norm.{c}"] = [[q, mn, mx] for q, mn, mx in p["norm_stats"]]
        extra[f"queries.{c}"] = (list(p["panel"].queries)
                                 if p["panel"] is not None else [])
    ckpt = os.path.join(args.out, "checkpoint.json")
    fluenet.save_checkpoint(ckpt, model, extra)
    log_path = os.path.join(args.out, "trainlog.csv")
    log.write_csv(log_path, sorted(countries))
    print(f"wrote {ckpt} (lr={log.lr}, M={log.m}, "
          f"best epoch {log.chosen_epoch})")
    print(f"wrote {log_path}")
    return 0


def cmd_evaluate(cfg, args) -> int:
    model, extra = fluenet.load_checkpoint(args.checkpoint)
    term = extra.get("term", "")
    countries = model.countries
    if not model.use_queries:
        cfg = dict(cfg)
        cfg["no_queries"] = "true"
    prepared = {c: _prepare_country(cfg, c) for c in countries}
    reports = []
    attention_rows = []
    for c in countries:
        p = prepared[c]
        rep = evalbench.evaluate_model(model, p["test"], c,
                                       "proposed", term)
        reports.append(rep)
        if p["panel"] is not None:
            for week, j, wgt in rep.attention:
                attention_rows.append((week, p["panel"].queries[j], wgt))
        if args.with_baselines:
            reports.append(evalbench.evaluate(
                evalbench.seasonal_naive, p["test"], model.s_out,
                "seasonal_naive", c, term))
            if p["panel"] is not None:
                series, plan = p["series"], p["plan"]
                fit_len = plan.train[1] - series.start + 1
                ar = evalbench.fit_ar_exog(series.values[:fit_len],
                                           p["panel"].matrix[:fit_len],
                                           p=model.n_in)

                def ar_predict(sample, ar=ar, p=p):
                    lq = p["panel"].matrix[
                        sample.last_week + 1 - p["panel"].start]
                    lags = sample.x_raw[::-1][:ar.order]
                    out = np.full(model.s_out, np.nan)
                    out[0] = ar.predict_one(lags, lq)
                    return out

                reports.append(evalbench.evaluate(
                    ar_predict, p["test"], model.s_out, "ar_exog", c, term))
    evalbench.write_report(os.path.join(args.out, "report.csv"), reports)
    evalbench.write_forecasts(os.path.join(args.out, "forecasts.csv"),
                              reports)
    att_path = os.path.join(args.out, "attention.csv")
    with open(att_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iso_week", "query", "weight"])
        for week, q, wgt in attention_rows:
            w.writerow([datahub.format_week(week), q, repr(wgt)])
    print(f"wrote {args.out}/report.csv, forecasts.csv, attention.csv")
    return 0


def cmd_forecast(cfg, args) -> int:
    """Forecast S weeks past the end of each country's series."""
    model, extra = fluenet.load_checkpoint(args.checkpoint)
    if not model.use_queries:
        cfg = dict(cfg)
        cfg["no_queries"] = "true"
    rows = []
    for c in model.countries:
        p = _prepare_country(cfg, c)
        series, seasonal = p["series"], p["seasonal"]
        template = p["template"]
        n = len(series)
        x_des = (series.values[n - model.n_in:]
                 - seasonal[n - model.n_in:]).reshape(1, -1)
        if p["panel"] is not None:
            q = p["panel"].matrix[n - model.n_in:]
            q = q.reshape(1, *q.shape)
        else:
            q = np.zeros((1, model.n_in, 0))
        o_hat, _ = fluenet.forward_batch(model, c, x_des, q)
        x_seas = decompose.extend_seasonal(template, n - 1, model.s_out)
        y_hat = o_hat.data[0] + x_seas
        for h in range(model.s_out):
            rows.append((series.end + 1 + h, c, h + 1, float(y_hat[h])))
    path = os.path.join(args.out, "forecasts.csv")
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iso_week", "country", "horizon", "y_pred"])
        for week, c, h, v in rows:
            w.writerow([datahub.format_week(week), c, h, repr(v)])
    print(f"wrote {path}")
    return 0


def cmd_correlate(cfg, args) -> int:
    all_series = datahub.load_ili(_get(cfg, "data.ili", required=True))
    countries = _countries(cfg, args)
    shifts = {}
    for c in countries:
        raw = _get(cfg, f"correlate.shift.{c}")
        if raw is not None:
            shifts[c] = int(raw)
    matrix = evalbench.correlation_report(
        {c: all_series[c] for c in countries}, shifts)
    path = os.path.join(args.out, "correlations.csv")
    evalbench.write_correlations(path, matrix)
    print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="flucast",
        description="Multi-country influenza forecasting toolkit")
    parser.add_argument("--config", required=True)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=".")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose")
    p.add_argument("--countries", default=None)

    p = sub.add_parser("select-queries")
    p.add_argument("--method", choices=["wt", "mapping"], default="wt")

    p = sub.add_parser("train")
    p.add_argument("--mode", choices=["single", "multi"], default=None)
    p.add_argument("--countries", default=None)
    p.add_argument("--no-country-embedding", action="store_true")
    p.add_argument("--no-queries", action="store_true")

    p = sub.add_parser("evaluate")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--with-baselines", action="store_true")

    p = sub.add_parser("forecast")
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("correlate")
    p.add_argument("--countries", default=None)

    args = parser.parse_args(argv)
    os.makedirs(args.out, exist_ok=True)
    try:
        cfg = load_config(args.config)
        handler = {
            "decompose": cmd_decompose,
            "select-queries": cmd_select_queries,
            "train": cmd_train,
            "evaluate": cmd_evaluate,
            "forecast": cmd_forecast,
            "correlate": cmd_correlate,
        }[args.command]
        return handler(cfg, args)
    except (ConfigError, datahub.DataError, querysel.SelectionError,
            querysel.MappingError, evalbench.MetricError,
            trainer.TrainingError, decompose.ParameterError,
            decompose.InsufficientDataError, nk.ContractError,
            FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
