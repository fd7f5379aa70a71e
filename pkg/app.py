"""
D-MoLE 桌面实验看板 - Streamlit应用
浏览运行目录：得分矩阵、AVG/Last/BWT、分配与激活热力图、阈值扫描
"""
from pathlib import Path

import pandas as pd
import streamlit as st
import yaml

from dmole.continual_trainer import sweep_thresholds
from dmole.errors import DmoleError
from dmole.metrics import ScoreMatrix, format_metric, summarize
from dmole.report_exporter import REPORT_DIR, generate_txt_report, get_download_filename, render_reports
from dmole.run_store import MANIFEST_NAME, read_manifest


def find_runs(root: Path):
    if not root.is_dir():
        return []
    return sorted(p.parent for p in root.rglob(MANIFEST_NAME))


def read_csv(path: Path):
    return pd.read_csv(path, index_col=0) if path.is_file() else None


def main():
    st.set_page_config(
        page_title="D-MoLE 桌面实验看板",
        page_icon="🧪",
        layout="wide"
    )

    st.title("🧪 D-MoLE 桌面实验看板")
    st.markdown("**持续多模态指令微调** - 动态层级专家分配 + 模态间课程")
    st.markdown("---")

    with st.sidebar:
        st.header("📖 使用说明")
        st.markdown("""
        ### 产生运行目录

        ```
        python -m dmole run --config configs/heterogeneous5.yaml
        ```

        ### 看板内容

        - ✅ **得分矩阵**（含零样本行）
        - ✅ **AVG / Last / BWT** 汇总
        - ✅ **分配热力图**（任务 × 层）
        - ✅ **专家激活频率**
        - ⭐ **阈值扫描**（不重新训练）
        """)

        st.markdown("---")
        st.markdown("### ⚙️ 选项")
        runs_root = Path(st.text_input("运行根目录", value="runs"))
        runs = find_runs(runs_root)
        if not runs:
            st.warning("⚠️ 没有找到运行目录")
            return
        run_dir = st.selectbox("运行", runs, format_func=lambda p: str(p.relative_to(runs_root)))

    manifest = read_manifest(run_dir)
    config = yaml.safe_load((run_dir / 'config.yaml').read_text(encoding='utf-8'))

    col1, col2, col3, col4 = st.columns(4)
    with col1:
        st.metric("策略", config['strategy'])
    with col2:
        st.metric("种子", config['seed'])
    with col3:
        st.metric("任务流", config['stream']['preset'])
    with col4:
        st.metric("状态", "✅ 完成" if manifest.status == 'completed' else f"⚠️ {manifest.status}")

    if not (run_dir / 'score_matrix.csv').is_file():
        st.error("❌ 缺少得分矩阵（运行可能中途失败）")
        if manifest.error:
            st.caption(manifest.error)
        return

    scores = ScoreMatrix.load_csv(run_dir / 'score_matrix.csv')
    summary = summarize(scores)

    st.markdown("---")
    st.header("📊 指标")
    average = summary['average']
    col1, col2, col3, col4 = st.columns(4)
    with col1:
        st.metric("零样本", format_metric(sum(summary['zero_shot']) / len(summary['zero_shot'])))
    with col2:
        st.metric("AVG", format_metric(average['avg']))
    with col3:
        st.metric("Last", format_metric(average['last']))
    with col4:
        st.metric("BWT", format_metric(average['bwt']), help="最后一个任务没有定义，不计入平均")

    st.subheader("📈 得分矩阵")
    st.dataframe(scores.to_frame().set_index('after_task'), use_container_width=True)

    report_dir = run_dir / REPORT_DIR
    if st.button("🔄 重新生成报告"):
        try:
            result = render_reports(run_dir)
            for warning in result['warnings']:
                st.warning(f"⚠️ {warning}")
            st.success("✅ 报告已更新")
        except DmoleError as exc:
            st.error(f"❌ {exc}")

    st.markdown("---")
    st.subheader("📄 热力图")
    for title, name in [("视觉塔分配", 'allocation_vision.csv'), ("语言塔分配", 'allocation_llm.csv'),
                        ("视觉塔梯度范数", 'sensitivity_vision.csv'), ("语言塔梯度范数", 'sensitivity_llm.csv'),
                        ("专家激活频率", 'activation.csv'), ("相对权重变化", 'dynamics.csv')]:
        matrix = read_csv(report_dir / name)
        if matrix is None:
            continue
        with st.expander(f"**{title}**", expanded=name.startswith('allocation')):
            st.dataframe(matrix, use_container_width=True)

    st.markdown("---")
    st.subheader("🎚️ 阈值扫描")
    scales = st.multiselect("阈值系数", [0.1, 0.5, 1.0, 2.0, 10.0], default=[0.5, 1.0, 2.0])
    if st.button("开始扫描", disabled=not scales):
        with st.spinner("正在重新评估最终检查点..."):
            try:
                st.dataframe(sweep_thresholds(run_dir, sorted(scales)), use_container_width=True)
            except DmoleError as exc:
                st.error(f"❌ {exc}")

    st.markdown("---")
    st.subheader("📥 下载报告")
    plans = yaml.safe_load((run_dir / 'plans.yaml').read_text(encoding='utf-8')) \
        if (run_dir / 'plans.yaml').is_file() else None
    txt_report = generate_txt_report(summary, scores, config, plans, status=manifest.status)
    download_filename = get_download_filename(run_dir.name)
    st.download_button(
        label="📥 下载TXT报告",
        data=txt_report,
        file_name=download_filename,
        mime="text/plain",
        type="primary",
        use_container_width=True
    )
    st.caption(f"报告文件名: {download_filename}")


if __name__ == "__main__":
    main()
