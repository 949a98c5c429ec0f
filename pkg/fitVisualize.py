import argparse
import logging
import os
from typing import Optional

import numpy as np
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from burstContainer import read_ground_truth
from burstTrainer import FitLog
from depthEval import DepthMap, read_pfm

"""
@Data: 2025/5/28
@Desc: 拟合结果的 HTML 报告：损失 / alpha / 有效比例曲线，以及渲染深度（和真值）的三维曲面
"""

logger = logging.getLogger(__name__)


class FitVisualizer:
    def __init__(self, fit_dir: str, gt_dir: Optional[str] = None, max_side: int = 128):
        self.fit_dir = fit_dir
        self.gt_dir = gt_dir
        self.max_side = max_side
        self.output_file = os.path.join(fit_dir, "report.html")

    def _surface(self, depth: DepthMap, name: str, colorscale: str, showscale: bool) -> go.Surface:
        stride = max(1, int(np.ceil(max(depth.height, depth.width) / self.max_side)))
        z = np.where(depth.valid, depth.depths, np.nan)[::stride, ::stride]
        vs, us = np.mgrid[0:depth.height:stride, 0:depth.width:stride]
        return go.Surface(x=us, y=vs, z=z, name=name, colorscale=colorscale, showscale=showscale, opacity=0.9)

    def create_figure(self) -> go.Figure:
        log = FitLog.from_jsonl(os.path.join(self.fit_dir, "fit_log.jsonl"))
        depth = read_pfm(os.path.join(self.fit_dir, "depth.pfm"))
        gt = read_ground_truth(self.gt_dir) if self.gt_dir else None

        fig = make_subplots(
            rows=2, cols=2,
            specs=[[{"type": "xy"}, {"type": "xy"}], [{"type": "scene", "colspan": 2}, None]],
            subplot_titles=("photometric loss", "alpha / valid fraction", "rendered depth"),
            row_heights=[0.35, 0.65],
        )
        iters = [r["iteration"] for r in log.records]
        fig.add_trace(go.Scatter(x=iters, y=log.losses, mode="lines", name="loss"), row=1, col=1)
        fig.add_trace(go.Scatter(x=iters, y=[r["alpha"] for r in log.records], mode="lines", name="alpha"),
                      row=1, col=2)
        fig.add_trace(go.Scatter(x=iters, y=[r["valid_fraction"] for r in log.records], mode="lines",
                                 name="valid fraction"), row=1, col=2)
        for event in log.events:
            fig.add_vline(x=event["iteration"], line_dash="dot", line_color="red", row=1, col=1)

        fig.add_trace(self._surface(depth, "predicted", "Viridis", True), row=2, col=1)
        if gt is not None and gt.depth.depths.shape == depth.depths.shape:
            fig.add_trace(self._surface(gt.depth, "ground truth", "Greys", False), row=2, col=1)
        elif gt is not None:
            logger.warning("ground truth %s does not match the rendered depth %s; not plotted",
                           gt.depth.depths.shape, depth.depths.shape)

        fig.update_yaxes(type="log", row=1, col=1)
        fig.update_scenes(zaxis=dict(autorange="reversed"), aspectmode="manual", aspectratio=dict(x=1, y=1, z=0.4))
        fig.update_layout(title=dict(text=f"Fit report: {os.path.basename(os.path.abspath(self.fit_dir))}",
                                     x=0.5, xanchor="center"), height=1000, template="plotly_white")
        return fig

    def run(self) -> str:
        fig = self.create_figure()
        fig.write_html(self.output_file, include_plotlyjs="cdn")
        logger.info("report written to %s", self.output_file)
        return self.output_file


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="把拟合输出目录可视化为 HTML")
    parser.add_argument("--fit", "-f", required=True, help="tremorDepth fit 的输出目录")
    parser.add_argument("--gt", "-g", default=None, help="带真值的连拍容器目录")
    parser.add_argument("--max-side", type=int, default=128, help="曲面降采样后的最大边长")
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO)
    print(FitVisualizer(args.fit, args.gt, args.max_side).run())
