"""
Flow Run Inspector
Loss curves, sample scatter / images and the run ledger with change flags

    streamlit run streamlit_app.py
"""

from pathlib import Path

import numpy as np
import plotly.graph_objects as go
import streamlit as st

from run_ledger import RunLedger
from run_reports import loss_trend, ledger_frame, metrics_frame, samples_frame
import toy_datasets

st.set_page_config(page_title="Flow Run Inspector", page_icon="🌊", layout="wide")

# ============================================================================
# SESSION STATE INITIALIZATION
# ============================================================================
if 'ledger_path' not in st.session_state:
    st.session_state.ledger_path = 'data/ledger.db'

# ============================================================================
# HEADER
# ============================================================================
st.markdown("# 🌊 Flow Run Inspector")
st.caption("Training curves, samples and report history for autoregressive flow runs")

# ============================================================================
# SIDEBAR
# ============================================================================
with st.sidebar:
    st.header("⚙️ Configuration")
    metrics_path = st.text_input("Metrics file (NDJSON)", value="runs/gauss2d/metrics.ndjson")
    samples_path = st.text_input("Sample archive", value="runs/gauss2d/samples")
    st.session_state.ledger_path = st.text_input("Ledger database", value=st.session_state.ledger_path)
    window = st.slider("Moving-average window", min_value=1, max_value=100, value=20)
    patch = st.number_input("Image patch size (toyimg8)", min_value=1, max_value=8, value=2)

    st.markdown("---")
    if Path(st.session_state.ledger_path).exists():
        stats = RunLedger(st.session_state.ledger_path).get_stats()
        with st.expander("📊 Ledger Statistics"):
            col1, col2 = st.columns(2)
            with col1:
                st.metric("Reports", stats['total_reports'])
            with col2:
                st.metric("Success Rate", f"{stats['success_rate']:.0f}%")
            st.caption(f"⚠️ High-significance changes: {stats['high_changes']}")

tab1, tab2, tab3 = st.tabs(["📉 Training", "🎲 Samples", "🧠 Ledger"])

# ============================================================================
# TAB 1: TRAINING CURVES
# ============================================================================
with tab1:
    if not Path(metrics_path).exists():
        st.info("No metrics file yet. Run `python cli.py train --metrics <path>` first.")
    else:
        frame = metrics_frame(metrics_path, window=window)
        if frame.empty:
            st.warning("⚠️ Metrics file is empty")
        else:
            trend = loss_trend(frame, window=window)
            col1, col2, col3, col4 = st.columns(4)
            with col1:
                st.metric("Steps", int(frame['step'].iloc[-1]))
            with col2:
                st.metric("NF loss", f"{frame['nf_loss'].iloc[-1]:.4f}",
                          delta=f"{frame['nf_loss'].iloc[-1] - frame['nf_loss'].iloc[0]:+.4f}",
                          delta_color="inverse")
            with col3:
                st.metric("Align loss", f"{frame['align_loss'].iloc[-1]:.4f}")
            with col4:
                st.metric("Monotone (windowed)", "✅" if trend['strictly_decreasing'] else "⚠️")

            fig = go.Figure()
            for column, name in (('nf_loss', 'NF loss'), ('total', 'Total loss')):
                fig.add_trace(go.Scatter(x=frame['step'], y=frame[column], mode='lines', name=name, opacity=0.35))
                fig.add_trace(go.Scatter(x=frame['step'], y=frame[f'{column}_ma'], mode='lines',
                                         name=f'{name} (MA {window})'))
            fig.update_layout(height=420, xaxis_title="step", yaxis_title="nats / dim")
            st.plotly_chart(fig, use_container_width=True)

            align_fig = go.Figure()
            align_fig.add_trace(go.Scatter(x=frame['step'], y=frame['align_loss_ma'], mode='lines',
                                           name='align loss (MA)'))
            align_fig.update_layout(height=300, xaxis_title="step", yaxis_title="-cosine")
            st.plotly_chart(align_fig, use_container_width=True)

# ============================================================================
# TAB 2: SAMPLES
# ============================================================================
with tab2:
    if not Path(samples_path).exists():
        st.info("No sample archive yet. Run `python cli.py sample --checkpoint <dir> --out <dir>` first.")
    else:
        samples = samples_frame(samples_path)
        coords = [c for c in samples.columns if c.startswith('x')]
        st.metric("Samples", len(samples))
        if len(coords) == 2:
            fig = go.Figure()
            for label, group in samples.groupby('label'):
                fig.add_trace(go.Scatter(x=group['x0'], y=group['x1'], mode='markers',
                                         name=f"class {label}", marker=dict(size=3, opacity=0.5)))
            fig.update_layout(height=520, xaxis=dict(scaleanchor='y'))
            st.plotly_chart(fig, use_container_width=True)
        else:
            side = toy_datasets.IMAGE_SIDE
            shown = samples.groupby('label').head(4)
            cols = st.columns(4)
            for i, (_, row) in enumerate(shown.iterrows()):
                tokens = row[coords].to_numpy(dtype=np.float64).reshape(-1, patch * patch)
                image = toy_datasets.unpatchify(tokens, patch, side)
                with cols[i % 4]:
                    fig = go.Figure(go.Heatmap(z=image[::-1], colorscale='Viridis', showscale=False))
                    fig.update_layout(height=220, margin=dict(l=0, r=0, t=20, b=0),
                                      title=f"class {int(row['label'])}")
                    st.plotly_chart(fig, use_container_width=True)

# ============================================================================
# TAB 3: LEDGER
# ============================================================================
with tab3:
    if not Path(st.session_state.ledger_path).exists():
        st.info("No ledger yet; every CLI command records its report there.")
    else:
        ledger = RunLedger(st.session_state.ledger_path)
        kind = st.selectbox("Report kind", ['all', 'train', 'sample', 'classify', 'bench', 'roundtrip-check'])
        history = ledger_frame(ledger, None if kind == 'all' else kind)
        if history.empty:
            st.warning("⚠️ No reports of this kind")
        else:
            st.dataframe(history, use_container_width=True)
            if kind == 'classify' and 'agreement' in history:
                fig = go.Figure()
                for column in ('single_step_accuracy', 'bruteforce_accuracy', 'agreement'):
                    fig.add_trace(go.Scatter(x=history['recorded_at'], y=history[column],
                                             mode='lines+markers', name=column))
                st.plotly_chart(fig, use_container_width=True)

        st.markdown("### ⚠️ Recent Changes")
        changes = ledger.recent_changes()
        if not changes:
            st.success("✅ No significant changes recorded")
        for change in changes:
            icon = "🔴" if change['significance'] == 'HIGH' else "🟡"
            st.markdown(f"{icon} **{change['kind']}** `{change['field']}`: "
                        f"{change['from']:.4g} → {change['to']:.4g} ({Path(change['checkpoint']).name})")
