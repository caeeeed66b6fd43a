//! Parameter and FLOP accounting against a config's reference figures.

use std::fmt::Write;

use serde::Serialize;

use crate::network::{layer_prefix, LayerKind, Network};

/// FLOPs are counted as two per multiply-accumulate.
pub const FLOPS_PER_MAC: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditRow {
    pub index: usize,
    pub kind: LayerKind,
    /// `[C, H, W]`, empty for the head.
    pub output: Vec<usize>,
    pub params: usize,
    pub expected_params: Option<usize>,
    pub gflops: f64,
    pub expected_gflops: Option<f64>,
}

impl AuditRow {
    pub fn delta(&self) -> Option<i64> {
        self.expected_params.map(|e| self.params as i64 - e as i64)
    }

    /// An exact-formula row whose count differs from its reference.
    pub fn is_hard_failure(&self) -> bool {
        self.kind.is_exact() && self.delta().is_some_and(|d| d != 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub name: String,
    pub input: [usize; 3],
    pub rows: Vec<AuditRow>,
    pub total_params: usize,
    pub fused_params: usize,
    pub gflops: f64,
    pub expected_total: Option<usize>,
    pub expected_fused: Option<usize>,
    pub expected_gflops: Option<f64>,
}

/// Per-layer parameter counts `(index, count)`, read from the built store.
pub fn audit_parameters(net: &Network) -> Vec<(usize, usize)> {
    net.layers
        .iter()
        .map(|l| (l.spec.index, net.store.count_prefix(&layer_prefix(l.spec.index))))
        .collect()
}

/// Per-layer GFLOPs `(index, gflops)` at the configured input size.
pub fn audit_flops(net: &Network) -> Vec<(usize, f64)> {
    net.layers
        .iter()
        .map(|l| (l.spec.index, l.macs as f64 * FLOPS_PER_MAC / 1e9))
        .collect()
}

pub fn audit(net: &Network) -> AuditReport {
    let params = audit_parameters(net);
    let flops = audit_flops(net);
    let rows: Vec<AuditRow> = net
        .layers
        .iter()
        .zip(params.iter().zip(&flops))
        .map(|(l, (&(_, p), &(_, f)))| AuditRow {
            index: l.spec.index,
            kind: l.spec.kind,
            output: if l.out_shape[0] == 0 { vec![] } else { l.out_shape.to_vec() },
            params: p,
            expected_params: l.spec.params,
            gflops: f,
            expected_gflops: l.spec.gflops,
        })
        .collect();
    let r = &net.config.reference;
    AuditReport {
        name: net.config.name.clone(),
        input: net.config.input,
        total_params: net.store.total(),
        fused_params: net.store.fused_total(),
        gflops: flops.iter().map(|f| f.1).sum(),
        rows,
        expected_total: r.total_params,
        expected_fused: r.fused_params,
        expected_gflops: r.gflops,
    }
}

impl AuditReport {
    pub fn hard_failures(&self) -> Vec<&AuditRow> {
        self.rows.iter().filter(|r| r.is_hard_failure()).collect()
    }

    pub fn row(&self, index: usize) -> Option<&AuditRow> {
        self.rows.iter().find(|r| r.index == index)
    }

    /// Relative gap of the total count to its reference.
    pub fn total_gap(&self) -> Option<f64> {
        self.expected_total.map(|e| (self.total_params as f64 - e as f64) / e as f64)
    }

    pub fn gflops_gap(&self) -> Option<f64> {
        self.expected_gflops.map(|e| (self.gflops - e) / e)
    }

    pub fn table(&self) -> String {
        let opt = |v: Option<usize>| v.map_or("-".to_string(), |v| v.to_string());
        let mut s = String::new();
        let [c, h, w] = self.input;
        writeln!(s, "{} at {c}x{h}x{w}", self.name).unwrap();
        writeln!(
            s,
            "{:>3}  {:<8}  {:<12}  {:>9}  {:>9}  {:>8}  {:>7}  {:>7}",
            "#", "module", "output", "params", "expected", "delta", "GFLOPs", "ref"
        )
        .unwrap();
        for r in &self.rows {
            let out = r.output.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            let delta = r.delta().map_or("-".to_string(), |d| format!("{d:+}"));
            let mark = if r.is_hard_failure() { "  MISMATCH" } else { "" };
            writeln!(
                s,
                "{:>3}  {:<8}  {:<12}  {:>9}  {:>9}  {:>8}  {:>7.3}  {:>7}{mark}",
                r.index,
                r.kind.label(),
                if out.is_empty() { "-".into() } else { out },
                r.params,
                opt(r.expected_params),
                delta,
                r.gflops,
                r.expected_gflops.map_or("-".into(), |g| format!("{g:.2}")),
            )
            .unwrap();
        }
        let pct = |g: Option<f64>| g.map_or(String::new(), |g| format!(" ({:+.2}%)", 100.0 * g));
        writeln!(s, "total params {} vs {}{}", self.total_params, opt(self.expected_total), pct(self.total_gap())).unwrap();
        writeln!(s, "fused params {} vs {}", self.fused_params, opt(self.expected_fused)).unwrap();
        writeln!(
            s,
            "GFLOPs {:.3} vs {}{}",
            self.gflops,
            self.expected_gflops.map_or("-".into(), |g| format!("{g:.2}")),
            pct(self.gflops_gap())
        )
        .unwrap();
        s
    }
}
