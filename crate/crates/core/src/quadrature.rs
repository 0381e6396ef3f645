//! Gauss rules mapped to the unit interval.

use gauss_quad::jacobi::GaussJacobi;
use gauss_quad::legendre::GaussLegendre;

/// Nodes and weights on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl UnitRule {
    /// Gauss-Legendre with `degree` nodes: integrates `f` on `[0, 1]`.
    pub fn legendre(degree: usize) -> Self {
        let rule = GaussLegendre::new(degree).expect("Gauss-Legendre degree must be at least 2");
        let (nodes, weights) = rule
            .as_node_weight_pairs()
            .iter()
            .map(|&(x, w)| (0.5 * (x + 1.0), 0.5 * w))
            .unzip();
        Self { nodes, weights }
    }

    /// Gauss-Jacobi for the weight `u^beta` on `[0, 1]`, `beta > -1`.
    pub fn jacobi_left(degree: usize, beta: f64) -> Self {
        let rule = GaussJacobi::new(degree, 0.0, beta).expect("invalid Gauss-Jacobi parameters");
        // (1 + x)^beta dx on [-1, 1] maps to 2^{beta + 1} u^beta du
        let scale = 0.5f64.powf(beta + 1.0);
        let (nodes, weights) = rule
            .as_node_weight_pairs()
            .iter()
            .map(|&(x, w)| (0.5 * (x + 1.0), scale * w))
            .unzip();
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Applies the rule on `[a, b]` (the weight, if any, is scaled along).
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let width = b - a;
        width
            * self
                .nodes
                .iter()
                .zip(&self.weights)
                .map(|(&u, &w)| w * f(a + width * u))
                .sum::<f64>()
    }

    /// Composite rule over `panels` equal panels of `[a, b]`.
    pub fn integrate_composite<F: FnMut(f64) -> f64>(
        &self,
        a: f64,
        b: f64,
        panels: usize,
        mut f: F,
    ) -> f64 {
        let panels = panels.max(1);
        let width = (b - a) / panels as f64;
        (0..panels)
            .map(|k| {
                let lo = a + k as f64 * width;
                self.integrate(lo, lo + width, &mut f)
            })
            .sum()
    }
}
