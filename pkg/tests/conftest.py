import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from acceptance_log import ACCEPTANCE_LINES  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Twelve 64px synthetic tables on disk."""
    from splitmerge.synthgen import SynthSpec, generate_corpus

    out = tmp_path_factory.mktemp("tiny_corpus")
    spec = SynthSpec(image_size=64, rows=(2, 3), cols=(2, 3), font_height=(4, 5), row_gap=(6, 7),
                     col_gap=(6, 8), margin=(6, 7), chars_per_word=(1, 2), words_per_cell=(1, 1),
                     glyph_width=(2, 3))
    generate_corpus(spec, 12, out)
    return out


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
