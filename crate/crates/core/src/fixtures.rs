//! Built-in workloads used by the scenario suite and shipped as JSON under `fixtures/`.

use crate::coesim::CoEConfig;
use crate::opgraph::{DType, GraphFile, OpGraph, OpKind, Partition};

/// Twiddle-factor FFT step: `Gemm0 -> Mul -> Transpose -> Gemm1`.
///
/// Shapes are calibrated so the three fusion levels land near
/// 39.8 / 100.0 / 410.1 FLOPs per byte (reference values 39.5 / 102.6 / 410.4).
/// The twiddle factors are a row vector broadcast over the rows of `t0`.
pub fn monarch() -> OpGraph {
    monarch_with(2048, 8, 512, 256)
}

/// Same structure with custom extents: `x[m,k] * f0[k,n]`, transpose to `[n,m]`,
/// then `* f1[m,p]`.
pub fn monarch_with(m: u64, k: u64, n: u64, p: u64) -> OpGraph {
    let bf = DType::BF16;
    let mut g = OpGraph::new("monarch");
    g.tensor_spec("x", &[m, k], bf)
        .tensor_spec("f0", &[k, n], bf)
        .tensor_spec("t0", &[m, n], bf)
        .tensor_spec("twiddle", &[n], bf)
        .tensor_spec("t1", &[m, n], bf)
        .tensor_spec("t2", &[n, m], bf)
        .tensor_spec("f1", &[m, p], bf)
        .tensor_spec("y", &[n, p], bf)
        .op("gemm0", OpKind::Gemm, &["x", "f0"], &["t0"])
        .op("mul", OpKind::elementwise("mul"), &["t0", "twiddle"], &["t1"])
        .op("transpose", OpKind::Transpose { perm: None }, &["t1"], &["t2"])
        .op("gemm1", OpKind::Gemm, &["t2", "f1"], &["y"]);
    g
}

/// No fusion, `{Gemm0, Mul, Transpose}{Gemm1}`, and full fusion.
pub fn monarch_partitions() -> [Partition; 3] {
    [
        Partition::from_groups(&[&["gemm0"], &["mul"], &["transpose"], &["gemm1"]]),
        Partition::from_groups(&[&["gemm0", "mul", "transpose"], &["gemm1"]]),
        Partition::from_groups(&[&["gemm0", "mul", "transpose", "gemm1"]]),
    ]
}

pub const DECODER_HIDDEN: u64 = 4096;
pub const DECODER_HEADS: u64 = 32;
pub const DECODER_FFN: u64 = 11008;
pub const DECODER_PREFILL_SEQ: u64 = 4096;
pub const DECODER_CONTEXT: u64 = 4096;

/// Kernel boundaries for the decoder fixtures: QKV projection (which also
/// writes the KV cache), attention, and MLP kernels.
pub const DECODER_HINTS: [&str; 4] = ["qr", "k_out", "v_out", "h"];

/// A 33-operator Llama-style decoder block over a 4K prompt.
pub fn decoder_prefill() -> OpGraph {
    decoder_block("decoder_prefill", DECODER_PREFILL_SEQ, None)
}

/// The same block generating one token against a 4K KV cache.
pub fn decoder_decode() -> OpGraph {
    decoder_block("decoder_decode", 1, Some(DECODER_CONTEXT))
}

/// Builds the decoder block. With `context = None` attention runs over the
/// fresh keys and values; otherwise over a cache of `context` positions.
pub fn decoder_block(name: &str, seq: u64, context: Option<u64>) -> OpGraph {
    let (h, nh, f) = (DECODER_HIDDEN, DECODER_HEADS, DECODER_FFN);
    let d = h / nh;
    let t = context.unwrap_or(seq);
    let bf = DType::BF16;
    let fp = DType::FP32;
    let ew = |op: &str, flops: u64| OpKind::Elementwise {
        op: op.to_string(),
        flops_per_element: flops,
    };
    let row_sum = OpKind::Reduce {
        axis: -1,
        keepdim: true,
    };

    let mut g = OpGraph::new(name);
    g.tensor_spec("x", &[seq, h], bf)
        .tensor_spec("g_attn", &[h], bf)
        .tensor_spec("g_mlp", &[h], bf)
        .tensor_spec("wq", &[nh, h, d], bf)
        .tensor_spec("wk", &[nh, h, d], bf)
        .tensor_spec("wv", &[nh, h, d], bf)
        .tensor_spec("wo", &[nh, d, h], bf)
        .tensor_spec("w_gate", &[h, f], bf)
        .tensor_spec("w_up", &[h, f], bf)
        .tensor_spec("w_down", &[f, h], bf)
        .tensor_spec("rope", &[seq, d], bf)
        .tensor_spec("mask", &[seq, t], bf);
    for (id, shape, dt) in [
        ("sq1", vec![seq, h], fp),
        ("ss1", vec![seq, 1], fp),
        ("mean1", vec![seq, 1], fp),
        ("rstd1", vec![seq, 1], fp),
        ("xn", vec![seq, h], bf),
        ("xg", vec![seq, h], bf),
        ("q", vec![nh, seq, d], bf),
        ("k", vec![nh, seq, d], bf),
        ("v", vec![nh, seq, d], bf),
        ("qr", vec![nh, seq, d], bf),
        ("kr", vec![nh, seq, d], bf),
        ("k_out", vec![nh, seq, d], bf),
        ("v_out", vec![nh, seq, d], bf),
        ("kt", vec![nh, d, t], bf),
        ("scores", vec![nh, seq, t], fp),
        ("scaled", vec![nh, seq, t], fp),
        ("masked", vec![nh, seq, t], fp),
        ("probs", vec![nh, seq, t], bf),
        ("ctx", vec![nh, seq, d], bf),
        ("o_heads", vec![nh, seq, h], fp),
        ("o", vec![seq, h], bf),
        ("h", vec![seq, h], bf),
        ("sq2", vec![seq, h], fp),
        ("ss2", vec![seq, 1], fp),
        ("rstd2", vec![seq, 1], fp),
        ("hn", vec![seq, h], bf),
        ("hg", vec![seq, h], bf),
        ("gate", vec![seq, f], bf),
        ("up", vec![seq, f], bf),
        ("act", vec![seq, f], bf),
        ("gu", vec![seq, f], bf),
        ("down", vec![seq, h], bf),
        ("y", vec![seq, h], bf),
    ] {
        g.tensor_spec(id, &shape, dt);
    }
    let (keys, values) = match context {
        Some(c) => {
            g.tensor_spec("k_cache", &[nh, c, d], bf)
                .tensor_spec("v_cache", &[nh, c, d], bf);
            ("k_cache", "v_cache")
        }
        None => ("k_out", "v_out"),
    };

    g.op("sq1", ew("mul", 1), &["x", "x"], &["sq1"])
        .op("ss1", row_sum.clone(), &["sq1"], &["ss1"])
        .op("mean1", ew("scale", 1), &["ss1"], &["mean1"])
        .op("rstd1", ew("rsqrt", 1), &["mean1"], &["rstd1"])
        .op("xn", ew("mul", 1), &["x", "rstd1"], &["xn"])
        .op("xg", ew("mul", 1), &["xn", "g_attn"], &["xg"])
        .op("q_proj", OpKind::Gemm, &["xg", "wq"], &["q"])
        .op("k_proj", OpKind::Gemm, &["xg", "wk"], &["k"])
        .op("v_proj", OpKind::Gemm, &["xg", "wv"], &["v"])
        .op("rope_q", ew("rope", 3), &["q", "rope"], &["qr"])
        .op("rope_k", ew("rope", 3), &["k", "rope"], &["kr"])
        .op("k_store", OpKind::Other { flops_per_element: 0 }, &["kr"], &["k_out"])
        .op("v_store", OpKind::Other { flops_per_element: 0 }, &["v"], &["v_out"])
        .op(
            "k_transpose",
            OpKind::Transpose {
                perm: Some(vec![0, 2, 1]),
            },
            &[keys],
            &["kt"],
        )
        .op("qk", OpKind::Gemm, &["qr", "kt"], &["scores"])
        .op("scale", ew("scale", 1), &["scores"], &["scaled"])
        .op("mask", ew("add", 1), &["scaled", "mask"], &["masked"])
        .op("softmax", OpKind::Softmax, &["masked"], &["probs"])
        .op("pv", OpKind::Gemm, &["probs", values], &["ctx"])
        .op("o_proj", OpKind::Gemm, &["ctx", "wo"], &["o_heads"])
        .op(
            "head_sum",
            OpKind::Reduce {
                axis: 0,
                keepdim: false,
            },
            &["o_heads"],
            &["o"],
        )
        .op("residual1", ew("add", 1), &["x", "o"], &["h"])
        .op("sq2", ew("mul", 1), &["h", "h"], &["sq2"])
        .op("ss2", row_sum, &["sq2"], &["ss2"])
        .op("rstd2", ew("rsqrt", 2), &["ss2"], &["rstd2"])
        .op("hn", ew("mul", 1), &["h", "rstd2"], &["hn"])
        .op("hg", ew("mul", 1), &["hn", "g_mlp"], &["hg"])
        .op("gate_proj", OpKind::Gemm, &["hg", "w_gate"], &["gate"])
        .op("up_proj", OpKind::Gemm, &["hg", "w_up"], &["up"])
        .op("silu", ew("silu", 4), &["gate"], &["act"])
        .op("gu", ew("mul", 1), &["act", "up"], &["gu"])
        .op("down_proj", OpKind::Gemm, &["gu", "w_down"], &["down"])
        .op("residual2", ew("add", 1), &["h", "down"], &["y"]);
    g
}

/// A single-operator graph: one kernel regardless of policy.
pub fn single_gemm(m: u64, k: u64, n: u64) -> OpGraph {
    let mut g = OpGraph::new("single_gemm");
    g.tensor_spec("a", &[m, k], DType::BF16)
        .tensor_spec("b", &[k, n], DType::BF16)
        .tensor_spec("c", &[m, n], DType::BF16)
        .op("gemm", OpKind::Gemm, &["a", "b"], &["c"]);
    g
}

/// The single-kernel orchestration workload.
pub fn single_kernel() -> OpGraph {
    single_gemm(8192, 8192, 8192)
}

/// Files shipped under `fixtures/`, as (file name, contents).
pub fn shipped() -> Vec<(&'static str, String)> {
    let graph = |g: OpGraph, hints: &[&str]| GraphFile::from_graph(&g).with_hints(hints).to_json() + "\n";
    vec![
        ("monarch.json", graph(monarch(), &[])),
        ("decoder_prefill.json", graph(decoder_prefill(), &DECODER_HINTS)),
        ("decoder_decode.json", graph(decoder_decode(), &DECODER_HINTS)),
        ("single_gemm.json", graph(single_kernel(), &[])),
        ("coe_150.json", CoEConfig::default().to_json() + "\n"),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opgraph::validate_graph;

    #[test]
    fn decoder_fixtures_are_valid_and_have_33_ops() {
        for g in [decoder_prefill(), decoder_decode()] {
            let r = validate_graph(&g);
            assert!(r.is_ok(), "{}: {:?}", g.name, r.errors);
            assert_eq!(g.operators().len(), 33);
        }
    }
}
