import asyncio
import json

import pytest

from prompt.create_prompt import register_prompts
from resource.create_resource import register_resources
from tool.create_tool import format_error, format_success, register_tools
from workflow import TAIL_STUDY, Step, StepType, init_workflows, try_execute_step, workflow_registry
from workflow.registry import WorkflowDefinition, WorkflowRegistry


def _run(coro):
    return asyncio.run(coro)


@pytest.fixture
def registry():
    reg = WorkflowRegistry()
    reg.register(
        WorkflowDefinition(
            workflow_type="demo",
            name="demo",
            description="",
            steps=["prepare_dataset", "train_representation", "diagnose_rv", "export_report"],
        )
    )
    return reg


class TestRegistry:
    def test_unknown_step_rejected(self):
        reg = WorkflowRegistry()
        with pytest.raises(ValueError):
            reg.register(WorkflowDefinition("bad", "bad", "", ["prepare_dataset", "index_code"]))

    def test_unknown_workflow_type(self, registry):
        with pytest.raises(ValueError):
            registry.create_session("missing")

    def test_session_lifecycle(self, registry):
        session = registry.create_session("demo", context={"seed": 1})
        assert session.session_id.startswith("tail_study_")
        assert registry.get_session(session.session_id) is session
        assert session.get_current_step().name == "prepare_dataset"
        assert registry.remove_session(session.session_id)
        assert registry.get_session(session.session_id) is None

    def test_init_workflows_is_idempotent(self):
        init_workflows()
        init_workflows()
        assert workflow_registry.has_definition(TAIL_STUDY)


class TestEngine:
    def test_required_steps_in_order(self, registry):
        session = registry.create_session("demo")
        ok, error = try_execute_step(session, "train_representation")
        assert not ok and "步骤顺序错误" in error
        ok, error = try_execute_step(session, "prepare_dataset")
        assert ok and error is None

    def test_diagnostics_need_model(self, registry):
        session = registry.create_session("demo")
        ok, error = try_execute_step(session, "scale_barcode")
        assert not ok and "train_representation" in error

    def test_repeatable_step_inserted(self, registry):
        session = registry.create_session("demo")
        session.advance()
        session.advance()
        session.context["model"] = object()
        ok, _ = try_execute_step(session, "tail_curve")
        assert ok
        assert [s.name for s in session.steps] == [
            "prepare_dataset",
            "train_representation",
            "tail_curve",
            "diagnose_rv",
            "export_report",
        ]
        assert session.steps[2].step_type == StepType.REPEATABLE
        assert session.steps[2].inserted

    def test_failed_insertion_is_dropped(self, registry):
        session = registry.create_session("demo")
        session.advance()
        session.advance()
        session.context["model"] = object()
        try_execute_step(session, "scale_barcode")
        session.advance()
        try_execute_step(session, "tail_curve")
        ok, _ = try_execute_step(session, "diagnose_rv")
        assert ok
        assert [s.name for s in session.steps][session.current_index:] == ["diagnose_rv", "export_report"]

    def test_completed_session(self, registry):
        session = registry.create_session("demo")
        session.steps = [Step("export_report", StepType.FINAL, executed=True)]
        session.current_index = 1
        ok, error = try_execute_step(session, "export_report")
        assert not ok and "工作流已完成" in error

    def test_unknown_step(self, registry):
        session = registry.create_session("demo")
        ok, error = try_execute_step(session, "learn_something")
        assert not ok and "未知步骤" in error


class TestFormatting:
    def test_success_box(self):
        text = format_success("标题", "完成", {"会话ID": "abc", "列表": list(range(10))}, "下一步")
        assert "• 会话ID: abc" in text
        assert "(共10项)" in text
        assert "➡️ 下一步: 下一步" in text

    def test_error_box(self):
        text = format_error("失败", "第一行\n第二行")
        assert text.startswith("═") and "❌ 失败" in text and "  第二行" in text


def _session_id(text: str) -> str:
    for line in text.splitlines():
        if "会话ID:" in line:
            return line.split("会话ID:", 1)[1].strip()
    raise AssertionError(text)


class TestTools:
    def test_rejects_unknown_preset(self, fake_mcp):
        register_tools(fake_mcp)
        assert "未知预设" in _run(fake_mcp.tools["init_tail_workflow"](preset="huge"))
        assert "κ 必须在 (0, 1) 内" in _run(fake_mcp.tools["init_tail_workflow"](kappa=1.5))

    def test_missing_session(self, fake_mcp):
        register_tools(fake_mcp)
        assert "会话不存在" in _run(fake_mcp.tools["prepare_dataset"]("nope"))

    def test_out_of_order(self, fake_mcp):
        register_tools(fake_mcp)
        sid = _session_id(_run(fake_mcp.tools["init_tail_workflow"]()))
        assert "步骤顺序错误" in _run(fake_mcp.tools["train_representation"](sid))

    def test_bad_data_path(self, fake_mcp, tmp_path):
        register_tools(fake_mcp)
        sid = _session_id(_run(fake_mcp.tools["init_tail_workflow"]()))
        text = _run(fake_mcp.tools["prepare_dataset"](sid, data_path=str(tmp_path / "none.csv")))
        assert "数据准备失败" in text
        assert workflow_registry.get_session(sid).current_index == 0

    def test_full_flow(self, fake_mcp, tmp_path):
        register_tools(fake_mcp)
        register_resources(fake_mcp)
        tools = fake_mcp.tools

        sid = _session_id(_run(tools["init_tail_workflow"](preset="toy", kappa=0.25, seed=11)))
        assert "数据准备完成" in _run(tools["prepare_dataset"](sid, n=400))
        assert "训练完成" in _run(tools["train_representation"](sid, epochs=2))

        assert "正则变化检验完成" in _run(tools["diagnose_rv"](sid, permutations=50))
        assert "正则变化检验完成" in _run(tools["diagnose_rv"](sid, target="input", permutations=50))
        assert "未知 target" in _run(tools["diagnose_rv"](sid, target="output"))
        assert "条形码完成" in _run(tools["scale_barcode"](sid, lambdas="1,2,4"))
        assert "尾部损失曲线完成" in _run(tools["tail_curve"](sid, lambdas="1.0"))

        status = _run(tools["get_workflow_status"](sid))
        assert "模型: 已训练" in status

        report_json = json.loads(fake_mcp.resources["tail://session/{session_id}/report"](sid))
        assert "error" in report_json

        text = _run(tools["export_report"](sid, out_dir=str(tmp_path)))
        assert "报告已导出" in text
        assert (tmp_path / "report.json").exists() and (tmp_path / "model.json").exists()
        assert "工作流已完成" in _run(tools["tail_curve"](sid))

        report = json.loads(fake_mcp.resources["tail://session/{session_id}/report"](sid))
        assert "threshold" in report["scalars"]
        assert "diagnose_rv_0_latent_rv_n_extremes" in report["scalars"]
        assert "diagnose_rv_1_input_rv_pvalues" in report["pvalues"]
        assert "scale_barcode_0_constancy" in report["scalars"]

        info = json.loads(fake_mcp.resources["tail://session/{session_id}/info"](sid))
        assert info["trained"] and info["n_train"] + info["n_test"] == 400
        assert info["status"]["current_step"] is None

        sessions = json.loads(fake_mcp.resources["tail://sessions"]())
        assert sid in [s["session_id"] for s in sessions]
        assert sid in _run(tools["list_sessions"]())


class TestResourcesAndPrompts:
    def test_help(self, fake_mcp):
        register_resources(fake_mcp)
        assert "init_tail_workflow" in fake_mcp.resources["tail://help"]()

    def test_unknown_session(self, fake_mcp):
        register_resources(fake_mcp)
        assert "error" in json.loads(fake_mcp.resources["tail://session/{session_id}/info"]("nope"))

    def test_prompt(self, fake_mcp):
        register_prompts(fake_mcp)
        toy = fake_mcp.prompts["study_tail_representation"]("toy", "尾部是否可分？")
        assert "data_path" not in toy and "尾部是否可分？" in toy
        assert 'data_path="emb.csv"' in fake_mcp.prompts["study_tail_representation"]("emb.csv", "q")


class TestServer:
    def test_create_server_registers_tools(self):
        from main import create_server

        server = create_server()
        names = {tool.name for tool in _run(server.list_tools())}
        assert {"init_tail_workflow", "train_representation", "export_report"} <= names
