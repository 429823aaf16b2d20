"""FLOP and skip-memory accounting.

Only matrix multiplications, 3x3 convolutions and the attention dot product
are counted; one multiply-add is one flop. A training step costs three
forward passes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from pixdiff.uvit import UViTConfig, activation_memory

FLOP_CONVENTION = "multiply-add = 1 flop; train step = 3 x forward"
TRAIN_STEP_FACTOR = 3


def transformer_gflops(size: int, num_channels: int, blocks: int) -> float:
    # q, k, v, attn_out, mlp in (4), mlp out (4)
    linears = 12 * num_channels ** 2 * blocks * size ** 2
    attn = 2 * size ** 4 * blocks * num_channels
    return (linears + attn) / 1000 ** 3


def resblock_gflops(size: int, num_channels: int, blocks: int) -> float:
    flops = 2 * 3 ** 2 * blocks  # two 3x3 convolutions
    flops *= num_channels ** 2
    flops *= size ** 2
    return flops / 1000 ** 3


def transformer_params(num_channels: int, blocks: int) -> int:
    """Weights behind the linear term of :func:`transformer_gflops`."""
    return 12 * num_channels ** 2 * blocks


def resblock_params(num_channels: int, blocks: int) -> int:
    return 2 * 3 ** 2 * num_channels ** 2 * blocks


@dataclass(frozen=True)
class Stage:
    name: str
    block_type: str
    size: int
    channels: int
    blocks: int
    gflops: float
    params: int


@dataclass(frozen=True)
class CostReport:
    stages: tuple
    forward_gflops: float
    train_step_gflops: float
    params: int
    model_params: int | None = None
    convention: str = field(default=FLOP_CONVENTION)

    @property
    def flops_per_param(self) -> float:
        return self.forward_gflops * 1e9 / self.params if self.params else float("nan")

    def to_dict(self) -> dict:
        return {
            "convention": self.convention,
            "stages": [
                {"name": s.name, "block_type": s.block_type, "size": s.size, "channels": s.channels,
                 "blocks": s.blocks, "gflops": s.gflops, "params": s.params}
                for s in self.stages
            ],
            "forward_gflops": self.forward_gflops,
            "train_step_gflops": self.train_step_gflops,
            "params": self.params,
            "model_params": self.model_params,
            "flops_per_param": self.flops_per_param,
        }

    def table(self) -> str:
        lines = [f"# {self.convention}", f"{'stage':<12}{'type':<13}{'size':>6}{'ch':>6}{'blocks':>7}{'gflops':>12}"]
        for s in self.stages:
            lines.append(f"{s.name:<12}{s.block_type:<13}{s.size:>6}{s.channels:>6}{s.blocks:>7}{s.gflops:>12.3f}")
        lines.append(f"forward_gflops    {self.forward_gflops:.3f}")
        lines.append(f"train_step_gflops {self.train_step_gflops:.3f}")
        lines.append(f"params (counted)  {self.params}")
        if self.model_params is not None:
            lines.append(f"params (model)    {self.model_params}")
        lines.append(f"flops_per_param   {self.flops_per_param:.3f}")
        return "\n".join(lines)


def stages(config: UViTConfig, input_res: int) -> list[Stage]:
    out = []
    for k, size in enumerate(config.level_resolutions(input_res)):
        kind, c = config.block_type[k], config.channels[k]
        for stage, blocks in config.level_blocks(k):
            if kind == "Transformer":
                g, p = transformer_gflops(size, c, blocks), transformer_params(c, blocks)
            else:
                g, p = resblock_gflops(size, c, blocks), resblock_params(c, blocks)
            out.append(Stage(f"level{k}.{stage}", kind, size, c, blocks, g, p))
    return out


def report(stage_list, model_params: int | None = None) -> CostReport:
    stage_list = tuple(stage_list)
    fwd = sum(s.gflops for s in stage_list)
    return CostReport(
        stages=stage_list,
        forward_gflops=fwd,
        train_step_gflops=TRAIN_STEP_FACTOR * fwd,
        params=sum(s.params for s in stage_list),
        model_params=model_params,
    )


def model_cost(config: UViTConfig, input_res: int, include_model_params: bool = True) -> CostReport:
    """Stage-by-stage cost of ``config`` on a square ``input_res`` image."""
    model_params = None
    if include_model_params:
        from pixdiff.uvit import count_params

        model_params = count_params(config)
    return report(stages(config, input_res), model_params)


def skip_memory(config: UViTConfig, input_res: int, scheme: str = "residual_skip", batch: int = 1) -> int:
    mem = activation_memory(config, input_res, batch)
    if scheme not in ("residual_skip", "blockwise_skip"):
        raise ValueError(f"unknown skip scheme {scheme!r}")
    return getattr(mem, scheme)
