"""Run configuration: flat `key = value` files with section prefixes, typed
defaults for every key, command-line overrides, and a reproducible echo of
the fully resolved configuration."""
from __future__ import annotations

from dataclasses import dataclass
from datetime import date


class UsageError(ValueError):
    """Bad configuration keys/values or command usage."""


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes"):
        return True
    if t in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_date(text: str) -> date:
    return date.fromisoformat(text.strip())


def _parse_optional_date(text: str):
    return None if not text.strip() else _parse_date(text)


# key -> (parser, default, help)
CONFIG_SPEC: dict[str, tuple] = {
    "seed": (int, 7, "global seed; everything derives from it"),

    "gen.n_clients": (int, 20_000, "clients to generate"),
    "gen.months_span": (int, 20, "application dates spread over this many 30-day months"),
    "gen.base_default_rate": (float, 0.013, "positive rate at signal_strength 0"),
    "gen.signal_mode": (str, "sequential", "sequential | aggregate | mixed"),
    "gen.signal_strength": (float, 2.0, "latent log-odds per standardized signal unit"),
    "gen.tx_count_min": (int, 20, "minimum transactions per client"),
    "gen.tx_count_max": (int, 600, "maximum transactions per client"),
    "gen.tx_count_shape": (float, 1.25, "skew of the log-uniform count draw (>1 favors small)"),
    "gen.start_date": (_parse_date, date(2017, 1, 1), "first application date"),
    "gen.window_days": (int, 60, "length of the signal window before the application"),
    "gen.risky_merchant_count": (int, 3, "size of the designated risky merchant subset"),
    "gen.risky_rate": (float, 0.4, "in-window risky-event rate (sequential mode)"),
    "gen.placement_sharpness": (float, 1.2, "burst-position sensitivity to the signal"),
    "gen.trend_sharpness": (float, 1.2, "gap-reordering sensitivity to the signal"),
    "gen.history_days_min": (int, 90, "shortest client history in days"),
    "gen.history_days_max": (int, 400, "longest client history in days"),
    "gen.vocab_currency": (int, 4, "currency vocabulary size"),
    "gen.vocab_country": (int, 6, "country vocabulary size"),
    "gen.vocab_merchant_type": (int, 12, "merchant-type vocabulary size"),
    "gen.vocab_card_type": (int, 4, "card-type vocabulary size"),
    "gen.vocab_issuing_branch": (int, 8, "issuing-branch vocabulary size"),

    "data.dataset": (str, "dataset.csv", "transaction CSV consumed by train/evaluate"),
    "data.boundary": (_parse_optional_date, None,
                      "out-of-time split date (train strictly before); generate echoes one"),
    "data.max_sequence_length": (int, 800, "keep the last N transactions per client"),
    "data.include_days_since_issue": (_parse_bool, False,
                                      "add days_since_issue as a 13th scalar track"),
    "data.negative_ratio": (int, 10, "negatives kept per positive in the sampling pool"),

    "model.encoder": (str, "gru", "gru | lstm"),
    "model.bidirectional": (_parse_bool, False, "run the encoder in both directions"),
    "model.hidden_size": (int, 64, "recurrent state width"),

    "train.loss": (str, "margin_rank", "bce | margin_rank | margin_rank_plus_bce"),
    "train.margin": (float, 0.1, "ranking-loss margin"),
    "train.bce_weight": (float, 1.0, "BCE weight inside the combined loss"),
    "train.base_lr": (float, 0.01, "initial Adam learning rate"),
    "train.gamma": (float, 0.5, "per-epoch learning-rate decay factor"),
    "train.cycles": (int, 1, "learning-rate restart segments"),
    "train.epochs": (int, 8, "training epochs"),
    "train.batch_size": (int, 32, "training batch size"),
    "train.batch_size_valid": (int, 768, "validation scoring batch size"),
    "train.reg": (str, "none", "none | tx_dropout | tx_shuffle | embed_dropout"),
    "train.reg_p": (float, 0.1, "dropout probability for the chosen regularizer"),
    "train.n_ensemble": (int, 6, "independently trained ensemble members"),
    "train.valid_auc_sample": (int, 1500,
                               "validation subsample for per-epoch AUC tracking (0 = full)"),

    "eval.experiments": (str, "benchmark", "comma list: benchmark,learning_curve,tx_buckets,"
                                           "loss_grid,lr_grid"),
    "eval.curve_sizes": (str, "1000,5000,20000", "learning-curve training sizes"),
    "eval.curve_repeats": (int, 3, "repeats per learning-curve size"),
    "eval.tx_thresholds": (str, "1,25,100,350", "cumulative transaction-count thresholds"),
    "eval.tx_bucket_edges": (str, "1,25,100,350", "disjoint transaction-count bucket edges"),
    "eval.artifacts": (str, "", "directory holding model_*.bin (defaults to --out)"),
}


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def resolved_text(self) -> str:
        lines = ["# resolved configuration (reload with --config to reproduce the run)"]
        for key in CONFIG_SPEC:
            value = self.values[key]
            if value is None:
                value = ""
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def int_list(self, key: str) -> list[int]:
        text = self.values[key].strip()
        return [int(tok) for tok in text.split(",") if tok.strip()] if text else []

    def str_list(self, key: str) -> list[str]:
        text = self.values[key].strip()
        return [tok.strip() for tok in text.split(",") if tok.strip()] if text else []


def _reject_unknown(key: str) -> None:
    known = "\n  ".join(CONFIG_SPEC)
    raise UsageError(f"unknown config key {key!r}; valid keys:\n  {known}")


def _coerce(key: str, raw: str):
    parser = CONFIG_SPEC[key][0]
    try:
        return parser(raw.strip())
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad value for {key}: {raw!r} ({exc})") from None


def load_config(config_path=None, overrides: list[str] | None = None,
                seed: int | None = None) -> RunConfig:
    """Defaults, then the config file, then repeated --set key=value, then --seed."""
    values = {key: spec[1] for key, spec in CONFIG_SPEC.items()}
    if config_path is not None:
        with open(config_path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                stripped = line.strip()
                if not stripped or stripped.startswith("#"):
                    continue
                if "=" not in stripped:
                    raise UsageError(f"{config_path}:{line_no}: expected 'key = value'")
                key, _, raw = stripped.partition("=")
                key = key.strip()
                if key not in CONFIG_SPEC:
                    _reject_unknown(key)
                values[key] = _coerce(key, raw)
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        key = key.strip()
        if key not in CONFIG_SPEC:
            _reject_unknown(key)
        values[key] = _coerce(key, raw)
    if seed is not None:
        values["seed"] = seed
    return RunConfig(values)
