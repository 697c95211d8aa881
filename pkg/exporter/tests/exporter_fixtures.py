"""Shared builders: random models in the community checkpoint layout."""

import numpy as np

from ffwdexport.namemap import (
    community_default_map,
    engine_tensor_shapes,
    parse_name_map,
)

SMALL_CFG = dict(n_layers=2, d_model=16, d_ffn=48, n_heads=2, vocab_size=64,
                 block_size=8, max_context=128)


def build_model_pair(cfg, seed, tied=False, scale=0.25):
    """Random weights twice over: community-layout source and engine layout.

    The source dict stores linear weights (out_features, in_features), i.e.
    transposed relative to the engine dict, exactly as the default name map
    declares.
    """
    nm = parse_name_map(community_default_map(cfg, tied=tied))
    shapes = engine_tensor_shapes(cfg)
    rng = np.random.default_rng(seed)
    engine, source = {}, {}
    for engine_name, entry in nm.entries.items():
        shape = shapes[engine_name]
        if engine_name.endswith("_norm"):
            arr = (1.0 + 0.1 * rng.standard_normal(shape)).astype(np.float32)
        else:
            arr = (scale * rng.standard_normal(shape)).astype(np.float32)
        engine[engine_name] = arr
        source[entry.source] = (
            np.ascontiguousarray(arr.T) if entry.transpose else arr
        )
    return source, engine
