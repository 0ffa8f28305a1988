import numpy as np
import pytest

from magic_core.config import BlockSpec, NetworkConfig, ScaleSpec, SkipSpec
from magic_core.model import build_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_config(name="toy", block="group_conv", channels=(6, 12), skip=True, dpcm=False):
    scales = (ScaleSpec(1, channels[0], (BlockSpec(block, 3, groups=3 if block == "group_conv" else 1),)),
              ScaleSpec(4, channels[1], (BlockSpec("depthwise_separable", 3),)))
    skips = (SkipSpec(0, 0, 2, dpcm=dpcm, dpcm_bits=8, quant_bits=12 if dpcm else None),) if skip else ()
    return NetworkConfig(name, scales, skips, 3, 3).validate()


def identity_model(channels=3):
    cfg = NetworkConfig("identity", (ScaleSpec(1, channels, (BlockSpec("pointwise", residual=False),)),),
                        (), channels, channels).validate()
    m = build_model(cfg, 0)
    for name, p in m.params.items():
        p.data[...] = 0
        if name.endswith(".w"):
            p.data[:, :, 0, 0] = np.eye(channels)
    return m


def randomize(model, rng, scale=0.1):
    """Give biases and IIR weights random values so tests do not sit at the init point."""
    for name, p in model.params.items():
        if name.endswith(".b"):
            p.data[...] = rng.normal(scale=scale, size=p.data.shape)
        elif name.endswith(".iir.w1"):
            p.data[...] = rng.uniform(-0.9, 0.9, size=p.data.shape)
        elif ".iir." in name:
            p.data[...] = rng.normal(scale=0.5, size=p.data.shape)
    return model


# acceptance criteria report one line each in the terminal summary
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (ok, detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
