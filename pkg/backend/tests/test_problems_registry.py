from __future__ import annotations

import textwrap

import pytest

from engine.errors import ConfigError
from problems import euler_interval, harmonic_disk, manufactured_disk
from problems.registry import load_problem, resolve_builder


def test_aliases_resolve_to_builtin_builders():
    assert resolve_builder("tp1") is harmonic_disk.build
    assert resolve_builder("TP2") is euler_interval.build
    assert resolve_builder("tp3") is manufactured_disk.build
    assert resolve_builder(manufactured_disk.MONOTONE_NAME) is manufactured_disk.build_monotone


def test_load_problem_applies_region_override():
    bundle = load_problem("tp1", lam=0.3, delta1=0.05)

    assert bundle.spec.name == harmonic_disk.NAME
    assert bundle.dom.lam == pytest.approx(0.3)
    assert bundle.dom.delta1 == pytest.approx(0.05)


def test_load_problem_from_user_module(tmp_path):
    module = tmp_path / "shifted_problem.py"
    module.write_text(
        textwrap.dedent(
            """
            import dataclasses

            from problems import harmonic_disk


            def build_problem():
                bundle = harmonic_disk.build()
                return dataclasses.replace(bundle, spec=bundle.spec.with_constants(beta=0.0))
            """
        ),
        encoding="utf-8",
    )

    bundle = load_problem(str(module))

    assert bundle.spec.constants.beta == 0.0
    assert bundle.spec.d == 2


def test_missing_problem_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError) as excinfo:
        load_problem(str(tmp_path / "nowhere.py"))

    assert excinfo.value.exit_status == 2
    assert excinfo.value.details["field"] == "problem"


def test_module_without_builder_is_a_config_error(tmp_path):
    module = tmp_path / "empty_problem.py"
    module.write_text("VALUE = 1\n", encoding="utf-8")

    with pytest.raises(ConfigError, match="build_problem"):
        load_problem(str(module))


def test_builder_must_return_a_bundle(tmp_path):
    module = tmp_path / "wrong_problem.py"
    module.write_text("def build_problem():\n    return {'name': 'wrong'}\n", encoding="utf-8")

    with pytest.raises(ConfigError, match="ProblemBundle"):
        load_problem(str(module))
