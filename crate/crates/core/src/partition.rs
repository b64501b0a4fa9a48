//! Element stiffness indicator and implicit/explicit partitioning.

use crate::basis::ReferenceElement;
use crate::mesh::{GeometricFactors, Mesh};

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub implicit: Vec<bool>,
    pub implicit_fraction: f64,
    /// Skeleton faces with one implicit and one explicit side.
    pub interface_faces: Vec<usize>,
    pub cutoff: f64,
}

impl Partition {
    pub fn from_flags(mesh: &Mesh, implicit: Vec<bool>, cutoff: f64) -> Self {
        assert_eq!(implicit.len(), mesh.n_elements());
        let n_im = implicit.iter().filter(|&&f| f).count();
        let interface_faces = mesh
            .faces
            .iter()
            .enumerate()
            .filter(|(_, f)| f.plus.map(|p| implicit[p.elem] != implicit[f.minus.elem]).unwrap_or(false))
            .map(|(i, _)| i)
            .collect();
        let implicit_fraction = if implicit.is_empty() { 0.0 } else { n_im as f64 / implicit.len() as f64 };
        Partition { implicit, implicit_fraction, interface_faces, cutoff }
    }

    pub fn all_explicit(mesh: &Mesh) -> Self {
        Self::from_flags(mesh, vec![false; mesh.n_elements()], 0.0)
    }

    pub fn all_implicit(mesh: &Mesh) -> Self {
        Self::from_flags(mesh, vec![true; mesh.n_elements()], f64::INFINITY)
    }

    pub fn n_implicit(&self) -> usize {
        self.implicit.iter().filter(|&&f| f).count()
    }

    pub fn implicit_elements(&self) -> Vec<usize> {
        (0..self.implicit.len()).filter(|&e| self.implicit[e]).collect()
    }

    pub fn explicit_elements(&self) -> Vec<usize> {
        (0..self.implicit.len()).filter(|&e| !self.implicit[e]).collect()
    }
}

/// `|element| / |boundary|`, both by quadrature.
pub fn stiffness_indicator(geom: &GeometricFactors, re: &ReferenceElement, e: usize) -> f64 {
    let g = &geom.elements[e];
    let area: f64 = g.jac.iter().zip(&re.weights).map(|(j, w)| j * w).sum();
    let perimeter: f64 = (0..4)
        .map(|f| {
            let w = &re.gl_faces[f].nodes.weights;
            g.gl_faces[f].jac.iter().zip(w).map(|(j, w)| j * w).sum::<f64>()
        })
        .sum();
    area / perimeter
}

pub fn stiffness_indicators(geom: &GeometricFactors, re: &ReferenceElement) -> Vec<f64> {
    (0..geom.elements.len()).map(|e| stiffness_indicator(geom, re, e)).collect()
}

/// Implicit iff the indicator is at most `cutoff`.
pub fn flag_implicit(mesh: &Mesh, indicators: &[f64], cutoff: f64) -> Partition {
    let flags = indicators.iter().map(|&s| s <= cutoff).collect();
    Partition::from_flags(mesh, flags, cutoff)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub implicit: usize,
    pub explicit: usize,
}

impl HistogramBin {
    pub fn count(&self) -> usize {
        self.implicit + self.explicit
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionReport {
    pub bins: Vec<HistogramBin>,
    pub implicit_fraction: f64,
    pub n_implicit: usize,
    pub n_elements: usize,
    pub n_interface_faces: usize,
}

/// Histogram of the indicator over `n_bins` logarithmic bins.
pub fn partition_report(indicators: &[f64], partition: &Partition, n_bins: usize) -> PartitionReport {
    let lo = indicators.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = indicators.iter().copied().fold(0.0, f64::max);
    let n_bins = n_bins.max(1);
    // Treat a spread below roundoff as a single size.
    let edges: Vec<f64> = if hi <= lo * (1.0 + 1e-12) {
        vec![lo, hi]
    } else {
        let (l0, l1) = (lo.ln(), hi.ln());
        (0..=n_bins).map(|k| (l0 + (l1 - l0) * k as f64 / n_bins as f64).exp()).collect()
    };
    let mut bins: Vec<HistogramBin> = edges.windows(2).map(|w| HistogramBin { lo: w[0], hi: w[1], implicit: 0, explicit: 0 }).collect();
    let nb = bins.len();
    for (e, &s) in indicators.iter().enumerate() {
        let k = if nb == 1 {
            0
        } else {
            let t = (s.ln() - lo.ln()) / (hi.ln() - lo.ln());
            ((t * nb as f64) as usize).min(nb - 1)
        };
        if partition.implicit[e] {
            bins[k].implicit += 1;
        } else {
            bins[k].explicit += 1;
        }
    }
    PartitionReport {
        bins,
        implicit_fraction: partition.implicit_fraction,
        n_implicit: partition.n_implicit(),
        n_elements: indicators.len(),
        n_interface_faces: partition.interface_faces.len(),
    }
}
