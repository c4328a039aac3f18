import pytest

# a few seconds of training on a small Gaussian-cluster problem
TINY = [
    "dataset.num_classes=3", "dataset.per_class=12", "dataset.test_per_class=6", "dataset.d_in=8",
    "model.backbone_widths=16,16", "model.projector_hidden=16", "model.projector_out=8", "model.predictor_hidden=16",
    "optim.batch_size=12", "optim.warmup_epochs=1", "run.epochs=2", "run.eval_every=1", "eval.knn_k=3",
    "eval.probe_epochs=3", "loss.K=4", "loss.lambda_s=0.004", "loss.lambda_b=0.5",
]


@pytest.fixture
def tiny_overrides():
    return list(TINY)


def override_args(items):
    out = []
    for item in items:
        out += ["--override", item]
    return out


# one pass/fail line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> str:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
