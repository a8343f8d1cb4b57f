import os

import pandas as pd
import pytest

from kinematics import save_motion
from metrics import MetricReport
from visualizer import MotionVisualizer, PlotError, format_metric_value, plot


def sample_report():
    return MetricReport(fid=1.5, r_top1=0.42, mm_dist=3.2, fs=0.01, fc=12.0, acce=0.002, jerk=0.001)


def test_trajectory_has_one_point_per_frame(compact, motion_factory):
    motion = motion_factory(compact, frames=90)
    fig = MotionVisualizer(formats=["html"]).create_trajectory_figure(motion, compact)
    head = [trace for trace in fig.data if trace.name == "head"][0]
    assert len(head.x) == 90
    assert len(fig.data) == len(compact.foot_joints) + 2


def test_metric_figure_bars(compact):
    fig = MotionVisualizer().create_metric_figure(sample_report())
    assert list(fig.data[0].x) == ["fid", "r_top1", "mm_dist", "fs", "fc", "acce", "jerk"]
    assert fig.data[0].text[1] == "42.0%"


def test_empty_inputs_raise():
    visualizer = MotionVisualizer()
    with pytest.raises(PlotError):
        visualizer.create_metric_figure({})
    with pytest.raises(PlotError):
        visualizer.create_comparison_figure(pd.DataFrame())


def test_format_metric_value():
    assert format_metric_value("fid", 1234.5) == "1234"
    assert format_metric_value("mm_dist", 3.14159) == "3.14"
    assert format_metric_value("fs", 0.012345) == "0.0123"


def test_plot_motion_file_and_report(tmp_path, compact, motion_factory):
    motion_path = str(tmp_path / "walk.egom")
    save_motion(motion_path, motion_factory(compact))
    report_path = str(tmp_path / "report.json")
    sample_report().to_json(report_path)
    visualizer = MotionVisualizer(formats=["html"])
    out = str(tmp_path / "plots")
    written = plot(motion_path, out, skel=compact, visualizer=visualizer)
    assert written == [os.path.join(out, "walk_trajectory.html")]
    written = plot(report_path, out, skel=compact, visualizer=visualizer)
    assert written == [os.path.join(out, "report_metrics.html")]
    with pytest.raises(PlotError):
        plot(str(tmp_path / "notes.txt"), out, skel=compact, visualizer=visualizer)


def test_html_output_is_reproducible(tmp_path, compact, motion_factory):
    visualizer = MotionVisualizer(formats=["html"])
    fig = visualizer.create_trajectory_figure(motion_factory(compact), compact)
    first = visualizer.save_figure(fig, str(tmp_path / "a" / "trajectory"))[0]
    second = visualizer.save_figure(fig, str(tmp_path / "b" / "trajectory"))[0]
    with open(first) as f, open(second) as g:
        assert f.read() == g.read()
