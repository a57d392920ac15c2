"""Compare characteristics across groups of individuals whose estimated
effects are insignificant, significantly negative or significantly
positive."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats

from .bootstrap import classify_significance

__all__ = ["GroupReport", "group_report", "labels_from_effects", "stars"]

GROUP_ORDER = ("none", "negative", "positive")


class ReportError(ValueError):
    pass


def stars(p: float) -> str:
    if p is None or np.isnan(p):
        return ""
    return "***" if p < 0.01 else "**" if p < 0.05 else "*" if p < 0.10 else ""


def labels_from_effects(effects: pd.DataFrame, alpha: float = 0.10) -> pd.Series:
    """Significance label per id.

    Uses the ``ci_lo``/``ci_hi`` columns when present, otherwise a normal
    interval ``tau_hat +/- z se`` at level ``alpha``.
    """
    df = effects.copy()
    df["id"] = df["id"].astype(str)
    if {"ci_lo", "ci_hi"} <= set(df.columns):
        ci = df[["ci_lo", "ci_hi"]].to_numpy(float)
    elif {"tau_hat", "se"} <= set(df.columns):
        zq = stats.norm.ppf(1 - alpha / 2)
        t, s = df["tau_hat"].to_numpy(float), df["se"].to_numpy(float)
        ci = np.column_stack([t - zq * s, t + zq * s])
    else:
        raise ReportError("effects file needs ci_lo/ci_hi or tau_hat/se columns")
    return pd.Series(classify_significance(ci), index=df["id"], name="group")


@dataclass
class GroupReport:
    """Group means with differences against the insignificant group.

    ``table`` has one row per characteristic and the columns ``none``,
    ``negative``, ``neg_diff``, ``positive``, ``pos_diff`` (plus the Welch
    p-values ``neg_p`` and ``pos_p``); ``counts`` gives the group sizes.
    """

    table: pd.DataFrame
    counts: dict

    def formatted(self, digits: int = 2) -> pd.DataFrame:
        """Five display columns: mean, mean, diff, mean, diff with stars."""

        def num(v):
            return "" if pd.isna(v) else f"{v:.{digits}f}"

        out = pd.DataFrame(index=self.table.index)
        out["(1) none"] = self.table["none"].map(num)
        out["(2) negative"] = self.table["negative"].map(num)
        out["(3) = (2)-(1)"] = [
            num(d) + stars(p) for d, p in zip(self.table["neg_diff"], self.table["neg_p"])
        ]
        out["(4) positive"] = self.table["positive"].map(num)
        out["(5) = (4)-(1)"] = [
            num(d) + stars(p) for d, p in zip(self.table["pos_diff"], self.table["pos_p"])
        ]
        n_row = pd.DataFrame(
            [[str(self.counts["none"]), str(self.counts["negative"]), "",
              str(self.counts["positive"]), ""]],
            index=["N"], columns=out.columns,
        )
        return pd.concat([out, n_row])

    def to_markdown(self, digits: int = 2) -> str:
        f = self.formatted(digits)
        cols = ["characteristic", *f.columns]
        lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
        for name, row in f.iterrows():
            lines.append("| " + " | ".join([str(name), *row.tolist()]) + " |")
        lines.append("")
        lines.append("Welch two-sample t-test: * 10%, ** 5%, *** 1%.")
        return "\n".join(lines) + "\n"

    def to_csv(self, path):
        self.formatted().to_csv(path, index_label="characteristic")
        return path


def group_report(labels: pd.Series, characteristics: pd.DataFrame, id_column: str = "id") -> GroupReport:
    """Mean of every characteristic per significance group, with Welch
    t-tests of the negative and positive groups against the ``none``
    group. Groups with no members get empty columns.
    """
    chars = characteristics.copy()
    chars[id_column] = chars[id_column].astype(str)
    chars = chars.set_index(id_column)
    labels = labels.copy()
    labels.index = labels.index.astype(str)
    only_effects = sorted(set(labels.index) - set(chars.index))
    only_chars = sorted(set(chars.index) - set(labels.index))
    if only_effects or only_chars:
        raise ReportError(
            "id mismatch between effects and characteristics: "
            f"missing characteristics for {only_effects}; missing effects for {only_chars}"
        )
    chars = chars.loc[labels.index]
    values = chars.select_dtypes("number")
    counts = {g: int((labels == g).sum()) for g in GROUP_ORDER}
    rows = {}
    for col in values.columns:
        x = values[col]
        base = x[labels == "none"].to_numpy(float)
        rec = {"none": base.mean() if base.size else np.nan}
        for g, tag in (("negative", "neg"), ("positive", "pos")):
            other = x[labels == g].to_numpy(float)
            rec[g] = other.mean() if other.size else np.nan
            if other.size and base.size:
                rec[f"{tag}_diff"] = rec[g] - rec["none"]
                if other.size > 1 and base.size > 1:
                    res = stats.ttest_ind(other, base, equal_var=False)
                    rec[f"{tag}_p"] = float(res.pvalue)
                else:
                    rec[f"{tag}_p"] = np.nan
            else:
                rec[f"{tag}_diff"] = np.nan
                rec[f"{tag}_p"] = np.nan
        rows[col] = rec
    table = pd.DataFrame.from_dict(
        rows, orient="index",
        columns=["none", "negative", "neg_diff", "neg_p", "positive", "pos_diff", "pos_p"],
    )
    return GroupReport(table, counts)
