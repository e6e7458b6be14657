import pytest

from mbrec.data import ConfigError
from mbrec.gradcheck import CASES, check_case, run_grad_check


class TestGradCheck:
    def test_linear_tight(self):
        report = check_case("linear")
        assert report
        # Quadratic loss: central differences are exact up to roundoff,
        # which the 1e-5 step amplifies to around 1e-9.
        assert max(report.values()) <= 1e-7

    @pytest.mark.parametrize("case", ["attention", "decoder", "denoiser"])
    def test_model_cases(self, case):
        report = check_case(case)
        assert report
        worst = max(report.values())
        assert worst <= 1e-4, f"{case}: max rel err {worst:.3e}"

    def test_run_all_covers_cases(self):
        out = run_grad_check("all", entries_per_param=2)
        assert sorted(out) == sorted(CASES)

    def test_unknown_case(self):
        with pytest.raises(ConfigError):
            check_case("softmax")

    def test_deterministic(self):
        a = check_case("linear", entries_per_param=4)
        b = check_case("linear", entries_per_param=4)
        assert a == b
