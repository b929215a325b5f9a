"""
Visualizer for Training Runs and Ablation Series
Generates interactive HTML charts using Plotly
"""

import logging
from typing import Dict, List

import plotly.graph_objects as go

logger = logging.getLogger(__name__)

METRIC_LABELS = {
    'r1': 'R@1',
    'r5': 'R@5',
    'r10': 'R@10',
    'map': 'mAP',
}

PALETTE = ['#4a90e2', '#52c41a', '#fa8c16', '#eb2f96', '#722ed1', '#13c2c2', '#a0d911']


class ReportVisualizer:
    """Creates validation-curve and ablation-series charts for a report"""

    def __init__(self, runs: Dict[str, List[Dict]]):
        """
        Args:
            runs: run label -> metrics rows (as read from metrics.csv)
        """
        self.runs = runs

    def _layout(self, fig: go.Figure, title: str, xaxis_title: str, yaxis_title: str):
        fig.update_layout(
            title=dict(text=title, x=0.5, font=dict(size=18)),
            showlegend=True,
            legend=dict(
                yanchor="bottom",
                y=0.01,
                xanchor="right",
                x=0.99,
                bgcolor='rgba(255,255,255,0.8)'
            ),
            hovermode='closest',
            xaxis=dict(title=xaxis_title, showgrid=True, gridcolor='#eee', zeroline=False),
            yaxis=dict(title=yaxis_title, showgrid=True, gridcolor='#eee', zeroline=False),
            plot_bgcolor='white',
            paper_bgcolor='#f5f5f5',
            margin=dict(l=60, r=40, t=80, b=60)
        )

    def curves_figure(self, metric: str = 'r1') -> go.Figure:
        """Validation metric against completed epochs, one line per run."""
        fig = go.Figure()
        for i, (label, rows) in enumerate(self.runs.items()):
            val = [r for r in rows if r['split'] == 'val']
            if not val:
                continue
            color = PALETTE[i % len(PALETTE)]
            fig.add_trace(go.Scatter(
                x=[r['epoch'] for r in val],
                y=[100.0 * r[metric] for r in val],
                mode='lines+markers',
                line=dict(color=color, width=2),
                marker=dict(size=5),
                name=label,
                hovertext=[f"{label} epoch {r['epoch']}: boosted {r['n_boosted']}" for r in val],
                hoverinfo='text+y'
            ))
        self._layout(fig, f"Validation {METRIC_LABELS[metric]} per epoch", "epoch",
                     f"{METRIC_LABELS[metric]} (%)")
        return fig

    def series_figure(self, summary: List[Dict], axis: str) -> go.Figure:
        """Mean metric per axis value with sample-std error bars."""
        fig = go.Figure()
        for i, metric in enumerate(('r1', 'map')):
            fig.add_trace(go.Scatter(
                x=[str(s['value']) for s in summary],
                y=[100.0 * s[f'{metric}_mean'] for s in summary],
                error_y=dict(type='data', array=[100.0 * s[f'{metric}_std'] for s in summary],
                             visible=True),
                mode='lines+markers',
                line=dict(color=PALETTE[i], width=2),
                marker=dict(size=8),
                name=METRIC_LABELS[metric]
            ))
        self._layout(fig, f"Ablation over {axis}<br><sup>mean over seeds, bars = sample std</sup>",
                     axis, "score (%)")
        return fig

    def generate_curves(self, output_file: str = "curves.html", metric: str = 'r1') -> str:
        fig = self.curves_figure(metric)
        fig.write_html(output_file, include_plotlyjs='cdn', div_id='curves')
        logger.info("curves saved to %s", output_file)
        return output_file

    def generate_series(self, summary: List[Dict], axis: str, output_file: str) -> str:
        fig = self.series_figure(summary, axis)
        fig.write_html(output_file, include_plotlyjs='cdn', div_id=f'series-{axis}')
        logger.info("series saved to %s", output_file)
        return output_file
