#!/usr/bin/env python3
"""Convert a Hugging Face BERT checkpoint directory into the runtime format.

Reads config.json, vocab.txt and the weights (model.safetensors or
pytorch_model.bin) and writes <out>/weights.bin + <out>/vocab.txt, the layout
expected next to checkpoints resolved through $ECSP_CACHE.

Linear weights are transposed on export: the runtime computes y = x W + b
with W stored (in, out); torch stores (out, in).
"""

import argparse
import json
import shutil
import struct
import sys
from pathlib import Path

import numpy as np


def load_state_dict(model_dir: Path) -> dict:
    st = model_dir / "model.safetensors"
    if st.exists():
        from safetensors.numpy import load_file

        return load_file(str(st))
    pt = model_dir / "pytorch_model.bin"
    if pt.exists():
        import torch

        raw = torch.load(str(pt), map_location="cpu", weights_only=True)
        return {k: v.numpy() for k, v in raw.items()}
    raise SystemExit(f"no model.safetensors or pytorch_model.bin in {model_dir}")


def strip_prefix(state: dict) -> dict:
    if any(k.startswith("bert.") for k in state):
        return {k[len("bert."):]: v for k, v in state.items() if k.startswith("bert.")}
    return state


def mapped_tensors(state: dict, layers: int):
    def emb(name):
        return np.asarray(state[name], dtype=np.float64)

    def row(name):  # (H,) vector -> 1 x H
        return emb(name).reshape(1, -1)

    def linear(name):  # torch (out, in) -> (in, out)
        return emb(name).T

    yield "embeddings.word", emb("embeddings.word_embeddings.weight")
    yield "embeddings.position", emb("embeddings.position_embeddings.weight")
    yield "embeddings.token_type", emb("embeddings.token_type_embeddings.weight")
    yield "embeddings.ln.gamma", row("embeddings.LayerNorm.weight")
    yield "embeddings.ln.beta", row("embeddings.LayerNorm.bias")
    for i in range(layers):
        hf = f"encoder.layer.{i}"
        ours = f"layer.{i}"
        for theirs, mine in [("attention.self.query", "attn.q"),
                             ("attention.self.key", "attn.k"),
                             ("attention.self.value", "attn.v"),
                             ("attention.output.dense", "attn.out")]:
            yield f"{ours}.{mine}.w", linear(f"{hf}.{theirs}.weight")
            yield f"{ours}.{mine}.b", row(f"{hf}.{theirs}.bias")
        yield f"{ours}.attn.ln.gamma", row(f"{hf}.attention.output.LayerNorm.weight")
        yield f"{ours}.attn.ln.beta", row(f"{hf}.attention.output.LayerNorm.bias")
        yield f"{ours}.ffn.in.w", linear(f"{hf}.intermediate.dense.weight")
        yield f"{ours}.ffn.in.b", row(f"{hf}.intermediate.dense.bias")
        yield f"{ours}.ffn.out.w", linear(f"{hf}.output.dense.weight")
        yield f"{ours}.ffn.out.b", row(f"{hf}.output.dense.bias")
        yield f"{ours}.ffn.ln.gamma", row(f"{hf}.output.LayerNorm.weight")
        yield f"{ours}.ffn.ln.beta", row(f"{hf}.output.LayerNorm.bias")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--model-dir", required=True, type=Path,
                    help="directory with config.json, vocab.txt and weights")
    ap.add_argument("--out", required=True, type=Path,
                    help="output directory (becomes $ECSP_CACHE/<model_id>)")
    args = ap.parse_args()

    config = json.loads((args.model_dir / "config.json").read_text())
    vocab_path = args.model_dir / "vocab.txt"
    if not vocab_path.exists():
        raise SystemExit(f"missing {vocab_path}")
    vocab_lines = vocab_path.read_text(encoding="utf-8").splitlines()
    if len(vocab_lines) != config["vocab_size"]:
        raise SystemExit(f"vocab.txt has {len(vocab_lines)} entries, "
                         f"config says vocab_size={config['vocab_size']}")

    state = strip_prefix(load_state_dict(args.model_dir))
    layers = config["num_hidden_layers"]
    tensors = list(mapped_tensors(state, layers))

    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "weights.bin", "wb") as f:
        f.write(b"ECSPBRT1")
        f.write(struct.pack("<6i", layers, config["hidden_size"],
                            config["num_attention_heads"], config["intermediate_size"],
                            config["vocab_size"], config["max_position_embeddings"]))
        f.write(struct.pack("<d", config.get("layer_norm_eps", 1e-12)))
        f.write(struct.pack("<I", len(tensors)))
        for name, m in tensors:
            m = np.ascontiguousarray(m, dtype="<f8")
            if m.ndim != 2:
                raise SystemExit(f"tensor {name} is not 2-D after mapping")
            f.write(struct.pack("<I", len(name)))
            f.write(name.encode("ascii"))
            f.write(struct.pack("<II", m.shape[0], m.shape[1]))
            f.write(m.tobytes())
    shutil.copyfile(vocab_path, args.out / "vocab.txt")
    print(f"wrote {len(tensors)} tensors to {args.out / 'weights.bin'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
