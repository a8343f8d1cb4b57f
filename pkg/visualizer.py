"""Static plots: overhead motion trajectories and metric bar charts."""

import json
import logging
import os
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import plotly.graph_objects as go

import config
from kinematics import GlobalMotion, SkeletonConfig, load_motion, load_motion_csv
from metrics import LOWER_IS_BETTER, METRIC_KEYS, METRIC_UNITS, MetricReport

logger = logging.getLogger(__name__)

FOOT_COLORS = ['#ef4444', '#3b82f6', '#f97316', '#22c55e']
HEAD_COLOR = '#111827'


class PlotError(ValueError):
    """Nothing to plot, or an unknown input."""


def format_metric_value(key: str, value: float) -> str:
    if key == "r_top1":
        return f"{value * 100:.1f}%"
    if abs(value) >= 100:
        return f"{value:.0f}"
    if abs(value) >= 1:
        return f"{value:.2f}"
    return f"{value:.4f}"


class MotionVisualizer:
    """Builds plotly figures and writes them as HTML (and PNG when an export backend exists)."""

    def __init__(self, formats: Optional[Sequence[str]] = None, width: int = 900, height: int = 600):
        self.formats = list(formats or config.PLOT_FORMATS)
        self.width = width
        self.height = height

    def create_trajectory_figure(self, motion: GlobalMotion, skel: SkeletonConfig,
                                 title: str = "Head trajectory (top view)") -> go.Figure:
        """Head path on the floor plane with foot tracks; one point per frame."""
        positions = motion.positions.astype(np.float64)
        head = positions[:, skel.head_joint]
        fig = go.Figure()
        for k, joint in enumerate(skel.foot_joints):
            name = skel.joint_names[joint] if skel.joint_names else f"foot {joint}"
            fig.add_trace(go.Scatter(
                name=name,
                x=positions[:, joint, 0],
                y=positions[:, joint, 2],
                mode='lines',
                line=dict(color=FOOT_COLORS[k % len(FOOT_COLORS)], width=1),
                opacity=0.6,
            ))
        fig.add_trace(go.Scatter(
            name='head',
            x=head[:, 0],
            y=head[:, 2],
            mode='lines+markers',
            marker=dict(color=np.arange(motion.num_frames), colorscale='Viridis', size=4),
            line=dict(color=HEAD_COLOR, width=2),
        ))
        fig.add_trace(go.Scatter(
            name='start / end',
            x=[head[0, 0], head[-1, 0]],
            y=[head[0, 2], head[-1, 2]],
            mode='markers+text',
            text=['start', 'end'],
            textposition='top center',
            marker=dict(color=['#22c55e', '#ef4444'], size=10, symbol='diamond'),
        ))
        fig.update_layout(
            title=title,
            xaxis_title='x (m)',
            yaxis_title='z (m)',
            yaxis=dict(scaleanchor='x', scaleratio=1),
            width=self.width,
            height=self.height,
            showlegend=True,
            legend=dict(orientation="h", yanchor="bottom", y=1.02, xanchor="right", x=1),
        )
        return fig

    def create_metric_figure(self, report: Union[MetricReport, Dict], title: str = "Motion metrics") -> go.Figure:
        """One bar per metric; lower-is-better metrics in red, higher-is-better in blue."""
        data = report.to_dict() if isinstance(report, MetricReport) else dict(report or {})
        keys = [key for key in METRIC_KEYS if key in data]
        if not keys:
            raise PlotError("Report has no metrics to plot")
        df = pd.DataFrame({
            'metric': keys,
            'value': [float(data[key]) for key in keys],
            'unit': [METRIC_UNITS[key] for key in keys],
        })
        df['label'] = [format_metric_value(k, v) for k, v in zip(df['metric'], df['value'])]
        fig = go.Figure(go.Bar(
            x=df['metric'],
            y=df['value'],
            text=df['label'],
            textposition='outside',
            customdata=df['unit'],
            hovertemplate='%{x}: %{y} %{customdata}<extra></extra>',
            marker_color=['#ef4444' if LOWER_IS_BETTER[k] else '#3b82f6' for k in keys],
        ))
        fig.update_layout(
            title=title,
            yaxis_type='log' if (df['value'] > 0).all() and df['value'].max() / df['value'].min() > 1e3 else 'linear',
            xaxis_title='metric',
            yaxis_title='value',
            width=self.width,
            height=self.height,
            showlegend=False,
        )
        return fig

    def create_comparison_figure(self, table: pd.DataFrame, title: str = "Variant comparison") -> go.Figure:
        """Grouped bars of per-metric ranks, one group per metric and one bar per variant."""
        if table is None or table.empty:
            raise PlotError("No variants to compare")
        rank_columns = [c for c in table.columns if c.endswith('_rank') and c != 'mean_rank']
        fig = go.Figure()
        for variant, row in table.iterrows():
            fig.add_trace(go.Bar(
                name=str(variant),
                x=[c[:-len('_rank')] for c in rank_columns],
                y=[row[c] for c in rank_columns],
            ))
        fig.update_layout(
            title=title,
            barmode='group',
            xaxis_title='metric',
            yaxis_title='rank (1 = best)',
            width=self.width,
            height=self.height,
        )
        return fig

    def save_figure(self, fig: go.Figure, path_stem: str) -> List[str]:
        """Write the figure in the configured formats; returns the written paths."""
        directory = os.path.dirname(path_stem)
        if directory:
            os.makedirs(directory, exist_ok=True)
        written = []
        if 'html' in self.formats:
            path = f"{path_stem}.html"
            fig.write_html(path, include_plotlyjs='cdn', full_html=True,
                           div_id=os.path.basename(path_stem), auto_open=False)
            written.append(path)
        if 'png' in self.formats and self.save_figure_as_image(fig, f"{path_stem}.png"):
            written.append(f"{path_stem}.png")
        return written

    def save_figure_as_image(self, fig: go.Figure, output_image_path: str) -> bool:
        """PNG export through kaleido. Returns True if successful."""
        try:
            import kaleido  # noqa: F401
        except ImportError:
            logger.warning("kaleido not installed; skipping PNG export. Install with: pip install kaleido")
            return False
        try:
            fig.write_image(output_image_path, width=self.width, height=self.height)
            logger.info(f"Figure image saved to {output_image_path}")
            return True
        except Exception as e:
            logger.warning(f"Could not export figure image: {e}")
            return False


def plot(source: Union[str, MetricReport, Dict, GlobalMotion], out_dir: str,
         skel: Optional[SkeletonConfig] = None, name: Optional[str] = None,
         visualizer: Optional[MotionVisualizer] = None) -> List[str]:
    """Plot a metric report or a motion (object or file path) into out_dir."""
    visualizer = visualizer or MotionVisualizer()
    skel = skel or SkeletonConfig.from_name(config.DEFAULT_SKELETON)
    if isinstance(source, str):
        stem = name or os.path.splitext(os.path.basename(source))[0]
        if source.endswith('.json'):
            with open(source) as f:
                source = json.load(f)
        elif source.endswith('.csv'):
            source = load_motion_csv(source, head_joint=skel.head_joint)
        elif source.endswith('.egom'):
            source = load_motion(source, head_joint=skel.head_joint)
        else:
            raise PlotError(f"Cannot plot '{source}': expected .json, .csv or .egom")
    else:
        stem = name or ("trajectory" if isinstance(source, GlobalMotion) else "metrics")

    if isinstance(source, GlobalMotion):
        fig = visualizer.create_trajectory_figure(source, skel)
        return visualizer.save_figure(fig, os.path.join(out_dir, f"{stem}_trajectory"))
    fig = visualizer.create_metric_figure(source)
    return visualizer.save_figure(fig, os.path.join(out_dir, f"{stem}_metrics"))
