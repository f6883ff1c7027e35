import json

import numpy as np
import pytest
from pydantic import ValidationError

from config import config
from services.attention import AttentionConfig
from services.audit import (
    AuditReport,
    FeatureShape,
    audit_report,
    audit_service,
    block_param_count,
    build_arch,
    conv_cost,
    count_flops,
    count_params,
    count_params_simplified,
    load_reference_table,
)
from services.blocks import SOURCE_PRESETS, BasicBlock, Bottleneck
from services.errors import ConfigError, FormatError, ShapeError

TABLE_II = [
    ("resnet50", "none", 25.56, 4.13),
    ("resnet50", "se", 28.07, 4.14),
    ("resnet50", "bav1", 28.71, 4.15),
    ("resnet50", "bav2", 28.70, 4.15),
    ("resnet101", "none", 44.55, 7.87),
    ("resnet101", "se", 49.29, 7.88),
    ("resnet101", "bav1", 50.49, 7.89),
    ("resnet101", "bav2", 50.48, 7.89),
]


def test_stage_plans():
    assert build_arch("resnet50").block_count == 16
    assert build_arch("resnet101", "bav2").block_count == 33


@pytest.mark.parametrize("backbone, attn, params_m, flops_g", TABLE_II)
def test_table_ii_parameters_and_flops(backbone, attn, params_m, flops_g):
    spec = build_arch(backbone, attn, r=16)
    params = count_params(spec)
    flops = count_flops(spec)
    assert abs(params / 1e6 - params_m) / params_m <= 0.005
    assert abs(flops / 1e9 - flops_g) / flops_g <= 0.02


def test_resnet50_exact_totals():
    assert count_params(build_arch("resnet50")) == 25_557_032
    assert count_params(build_arch("resnet50", "se")) == 28_071_976
    assert count_params(build_arch("resnet50", "bav1")) == 28_706_376
    assert count_params(build_arch("resnet50", "bav2")) == 28_702_648


def test_bav2_is_slightly_smaller_than_bav1():
    v1 = count_params(build_arch("resnet50", "bav1"))
    v2 = count_params(build_arch("resnet50", "bav2"))
    assert -20_000 < v2 - v1 < 0
    assert (round(v1 / 1e6, 2), round(v2 / 1e6, 2)) == (28.71, 28.70)


def test_se_adds_two_projections_per_block():
    gained = count_params(build_arch("resnet50", "se")) - count_params(build_arch("resnet50"))
    widths = [256] * 3 + [512] * 4 + [1024] * 6 + [2048] * 3
    assert gained == sum(2 * c * (c // 16) for c in widths)


def test_se_flops_overhead_is_about_ten_million():
    extra = count_flops(build_arch("resnet50", "se")) - count_flops(build_arch("resnet50"))
    assert 0.002e9 < extra < 0.02e9


def test_conv_mac_closed_form():
    assert conv_cost(64, 256, 1, FeatureShape(256, 56, 56)).flops == 64 * 256 * 56 * 56 == 51_380_224


def test_simplified_counting_differs_only_by_bn_accounting():
    for attn in ("bav1", "bav2"):
        spec = build_arch("resnet50", attn)
        assert count_params_simplified(spec) <= count_params(spec)
    spec = build_arch("resnet50", "se")
    assert count_params_simplified(spec) == count_params(spec)


@pytest.mark.parametrize("variant", [None, "se", "bav1", "bav2"])
@pytest.mark.parametrize("stride", [1, 2])
def test_block_count_matches_instantiated_bottleneck(variant, stride):
    cfg = AttentionConfig(variant=variant, reduction=16) if variant else None
    block = Bottleneck(128, 64, stride, cfg)
    assert block_param_count("bottleneck", 128, 64, stride, cfg) == block.num_parameters()


@pytest.mark.parametrize("variant", [None, "se", "bav1", "bav2"])
def test_block_count_matches_instantiated_basic(variant):
    cfg = AttentionConfig(variant=variant, reduction=16) if variant else None
    block = BasicBlock(64, 128, 2, cfg)
    assert block_param_count("basic", 64, 128, 2, cfg) == block.num_parameters()


@pytest.mark.parametrize("name", list(SOURCE_PRESETS))
def test_block_count_with_bridge_sources(name):
    cfg = AttentionConfig(variant="bav1", reduction=16, sources=SOURCE_PRESETS[name])
    block = Bottleneck(256, 64, 1, cfg)
    assert block_param_count("bottleneck", 256, 64, 1, cfg) == block.num_parameters()


@pytest.mark.parametrize("name", list(SOURCE_PRESETS))
def test_bridge_source_parameter_column(name):
    report = audit_report(build_arch("resnet50", "bav1", sources=SOURCE_PRESETS[name]))
    assert report.params_paper_ref is not None
    assert report.status == "PASS"


def _reference_rows():
    return sorted(load_reference_table(config.reference_table).values(), key=lambda c: (c.dataset, c.backbone, c.variant))


@pytest.mark.parametrize(
    "cell",
    [c for c in _reference_rows() if c.dataset != "imagenet"],
    ids=lambda c: f"{c.dataset}-{c.backbone}-{c.variant}",
)
def test_cifar_parameter_cells(cell):
    report = audit_report(build_arch(cell.backbone, cell.variant, dataset=cell.dataset))
    assert report.params_paper_ref == cell.params_millions
    assert report.status == "PASS"


def test_report_is_additive_and_schema_valid(tmp_path):
    report = audit_report(build_arch("resnet50", "bav2"))
    assert report.status == "PASS"
    assert [s.name for s in report.per_stage] == ["stem", "layer1", "layer2", "layer3", "layer4", "head"]
    assert report.r == 16
    assert abs(report.delta_pct) <= 0.5

    path = tmp_path / "report.json"
    path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    restored = AuditReport.model_validate_json(path.read_text(encoding="utf-8"))
    assert restored == report


def test_report_schema_rejects_non_additive_stages():
    payload = json.loads(audit_report(build_arch("resnet50")).model_dump_json())
    payload["per_stage"][1]["params"] += 1
    with pytest.raises(ValidationError):
        AuditReport.model_validate(payload)


def test_report_without_reference_cell():
    report = audit_report(build_arch("resnet18", "bav2"))
    assert report.status == "NO_REF"
    assert report.delta_pct is None


def test_printed_report_mentions_status():
    report = audit_report(build_arch("resnet50", "se"))
    text = audit_service.print_audit_report(report)
    assert "PASS" in text
    assert "layer3" in text


def test_build_arch_errors():
    with pytest.raises(ConfigError):
        build_arch("resnet9000")
    with pytest.raises(ConfigError):
        build_arch("resnet50", "se", sources=["adjacent"])
    with pytest.raises(ShapeError):
        count_params(build_arch("resnet50", "bav2", r=48))


def test_reference_table_errors(tmp_path):
    with pytest.raises(FormatError):
        load_reference_table(tmp_path / "missing.csv")
    broken = tmp_path / "broken.csv"
    broken.write_text("dataset,backbone,variant,params_millions,flops_g\nimagenet,resnet50,none,abc,\n", encoding="utf-8")
    with pytest.raises(ValidationError):
        load_reference_table(broken)


def test_audit_is_deterministic():
    a = audit_report(build_arch("resnet101", "bav1")).model_dump_json()
    b = audit_report(build_arch("resnet101", "bav1")).model_dump_json()
    assert a == b
    assert np.isclose(json.loads(a)["params_total"] / 1e6, 50.49, rtol=0.005)


def test_attention_strictly_increases_cost():
    base = build_arch("resnet34")
    report = audit_report(base)
    assert report.attention_overhead.params == 0
    assert report.attention_overhead.flops == 0
    for attn in ("se", "bav1", "bav2"):
        spec = build_arch("resnet34", attn)
        assert count_params(spec) > count_params(base)
        assert count_flops(spec) > count_flops(base)
