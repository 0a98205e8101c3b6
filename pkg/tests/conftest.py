import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


class DeskWorld:
    """A briefly pretrained autoencoder and a briefly warmed segmenter at the default image size."""

    def __init__(self):
        from ashplus import nets
        from ashplus.objectives import seg_loss
        from ashplus.synthdata import default_spec, generate_domain, generate_style_pool

        torch.set_num_threads(1)
        self.spec = default_spec()
        self.source = generate_domain(self.spec, 64, seed=1)
        self.pool = generate_style_pool(16, seed=2)
        ae = nets.pretrain_autoencoder(torch.cat([self.source.image_tensor(), self.pool]),
                                       nets.AutoencoderConfig(epochs=5))
        self.encoder, self.decoder = ae.encoder, ae.decoder
        torch.manual_seed(0)
        self.segmenter = nets.SegNet(8)
        opt = torch.optim.SGD(self.segmenter.parameters(), lr=1e-2, momentum=0.9)
        X, Y = self.source.image_tensor(), self.source.label_tensor()
        for i in range(100):
            b = torch.arange(i * 8, i * 8 + 8) % len(X)
            loss = seg_loss(self.segmenter(X[b]), Y[b])
            opt.zero_grad()
            loss.backward()
            opt.step()


@pytest.fixture(scope="session")
def desk_world():
    return DeskWorld()


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import VERDICTS

    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        ok, detail = VERDICTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
