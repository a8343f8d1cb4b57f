"""Rank and compare recorded run variants by their metric reports."""

import logging
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from metrics import LOWER_IS_BETTER, METRIC_KEYS

logger = logging.getLogger(__name__)


class AblationAnalyzer:
    """Ranks variants (paradigm, vlm_mode, condition mode) using recorded runs."""

    VARIANT_FIELDS = ('paradigm', 'vlm_mode', 'condition_mode')

    def __init__(self, run_recorder=None):
        self.recorder = run_recorder

    def variant_label(self, record: Dict) -> str:
        label = "/".join(str(record.get(f, '')) for f in self.VARIANT_FIELDS)
        return f"{record.get('name', '')}:{label}" if record.get('name') else label

    def load_reports(self, runs: Optional[List[Dict]] = None, latest_only: bool = True) -> pd.DataFrame:
        """One row per variant with its metrics and latency; newest run wins per variant."""
        if runs is None:
            runs = self.recorder.get_all_runs() if self.recorder else []
        rows = []
        seen = set()
        for record in sorted(runs, key=lambda r: r.get('timestamp', ''), reverse=True):
            label = self.variant_label(record)
            if latest_only and label in seen:
                continue
            report = record.get('report') or {}
            if not all(key in report for key in METRIC_KEYS):
                logger.warning(f"Run {record.get('id')} has an incomplete report; skipped")
                continue
            seen.add(label)
            row = {'variant': label, 'run_id': record.get('id')}
            row.update({f: record.get(f) for f in self.VARIANT_FIELDS})
            row.update({key: float(report[key]) for key in METRIC_KEYS})
            row['latency_ms'] = float(record.get('latency_ms', 0.0))
            rows.append(row)
        if not rows:
            return pd.DataFrame(columns=['variant', 'run_id', *self.VARIANT_FIELDS, *METRIC_KEYS, 'latency_ms'])
        return pd.DataFrame(rows).set_index('variant')

    def rank_variants(self, table: pd.DataFrame) -> pd.DataFrame:
        """Per-metric ranks (1 = best) and their mean; sorted best first."""
        ranked = table.copy()
        if ranked.empty:
            return ranked
        for key in METRIC_KEYS:
            ranked[f'{key}_rank'] = ranked[key].rank(ascending=LOWER_IS_BETTER[key], method='min')
        ranked['mean_rank'] = ranked[[f'{key}_rank' for key in METRIC_KEYS]].mean(axis=1)
        ranked = ranked.sort_values(['mean_rank', 'fid'])
        ranked['rank'] = np.arange(1, len(ranked) + 1)
        return ranked

    def compare_variants(self, first: str, second: str, table: pd.DataFrame) -> Dict:
        """Metric-by-metric comparison of two variants."""
        for label in (first, second):
            if label not in table.index:
                raise KeyError(f"Unknown variant '{label}'")
        a, b = table.loc[first], table.loc[second]
        metrics = {}
        wins = {first: 0, second: 0}
        for key in METRIC_KEYS:
            va, vb = float(a[key]), float(b[key])
            if va == vb:
                better = 'equal'
            elif (va < vb) == LOWER_IS_BETTER[key]:
                better = first
            else:
                better = second
            if better != 'equal':
                wins[better] += 1
            reference = max(abs(va), abs(vb))
            metrics[key] = {
                'first': va,
                'second': vb,
                'better': better,
                'difference_percent': round(abs(va - vb) / reference * 100, 1) if reference > 0 else 0.0,
            }
        overall = first if wins[first] > wins[second] else second if wins[second] > wins[first] else 'equal'
        return {'first': first, 'second': second, 'metrics': metrics, 'wins': wins, 'overall_better': overall}

    def get_summary_statistics(self, table: pd.DataFrame) -> Dict:
        ranked = self.rank_variants(table)
        if ranked.empty:
            return {'total_variants': 0, 'best_variant': None, 'best_by_metric': {}}
        best_by_metric = {}
        for key in METRIC_KEYS:
            column = ranked[key]
            best_by_metric[key] = column.idxmin() if LOWER_IS_BETTER[key] else column.idxmax()
        return {
            'total_variants': len(ranked),
            'best_variant': ranked.index[0],
            'best_by_metric': best_by_metric,
            'mean_latency_ms': float(ranked['latency_ms'].mean()),
            'fastest_variant': ranked['latency_ms'].idxmin(),
        }

    def to_markdown(self, table: pd.DataFrame) -> str:
        """Plain-text table for terminals and reports."""
        ranked = self.rank_variants(table)
        if ranked.empty:
            return "(no runs recorded)"
        columns = ['rank', *METRIC_KEYS, 'latency_ms', 'mean_rank']
        lines = ["| variant | " + " | ".join(columns) + " |",
                 "|" + "---|" * (len(columns) + 1)]
        for variant, row in ranked.iterrows():
            cells = [f"{row[c]:.4g}" if isinstance(row[c], (float, np.floating)) else str(row[c]) for c in columns]
            lines.append(f"| {variant} | " + " | ".join(cells) + " |")
        return "\n".join(lines)
