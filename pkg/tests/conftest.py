import math

import pytest
import torch
import torch.nn as nn

from qada.corpus import TARGET, QaExample
from qada.model import ModelConfig, QAOutput


def planted_example(i, confidence, context="left right", gold="left"):
    return QaExample(
        id=f"t{i}", context=context, question="q", context_ids=(4, 5),
        context_offsets=((0, context.index(" ")), (context.index(" ") + 1, len(context))), question_ids=(6,),
        answer_texts=(gold,), domain=TARGET, confidence=confidence,
    )


class PlantedReader(nn.Module):
    """Puts mass ``c`` on the first context token for start and end, so the decode confidence is ``c``.

    ``c`` is read from each example's ``confidence`` field.
    """

    def __init__(self):
        super().__init__()
        self.cfg = ModelConfig(vocab_size=8, max_answer_len=4)
        self.dummy = nn.Parameter(torch.zeros(1))

    def forward(self, batch, cutoff=None, overrides=None):
        logits = torch.full(batch.input_ids.shape, float("-inf"), dtype=torch.float64)
        for b, (cs, _) in enumerate(batch.context_spans):
            c = batch.examples[b].confidence
            logits[b, cs] = math.log(c)
            logits[b, cs + 1] = math.log(1 - c)
        return QAOutput(logits, logits.clone(), [], torch.zeros(*batch.input_ids.shape, 1))


@pytest.fixture
def planted():
    return PlantedReader(), [planted_example(i, c) for i, c in enumerate((0.55, 0.60, 0.90))]


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py" not in getattr(report, "nodeid", "") or report.when not in ("call", "setup"):
                continue
            recorded = [v for k, v in report.user_properties if k == "acceptance"]
            if recorded:
                lines.extend(recorded)
            elif report.failed:
                lines.append(f"FAIL  {report.nodeid.split('::')[-1]}: raised before reaching a verdict")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
