use super::{LuLayer, LuNet};

/// Gradient of one layer, stored in exactly the packed shapes of the
/// parameters. There is no storage for masked positions.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    /// Packed like `UpperTriangular`, diagonal included.
    pub upper: Vec<f64>,
    /// Packed like the strict lower part of `UnitLowerTriangular`.
    pub lower: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &LuLayer) -> Self {
        Self {
            upper: vec![0.0; layer.upper.packed().len()],
            lower: vec![0.0; layer.lower.packed().len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }

    pub fn blocks(&self) -> [&[f64]; 3] {
        [&self.upper, &self.lower, &self.bias]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 3] {
        [&mut self.upper, &mut self.lower, &mut self.bias]
    }
}

/// Per-layer gradients of a whole net, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
}

impl GradientSet {
    pub fn zeros_like(net: &LuNet) -> Self {
        Self {
            layers: net.layers().iter().map(LayerGrad::zeros_like).collect(),
        }
    }

    /// True when every block has the same length as the matching
    /// parameter block of `net`.
    pub fn matches_shape(&self, net: &LuNet) -> bool {
        self.layers.len() == net.depth()
            && self.layers.iter().zip(net.layers()).all(|(g, l)| {
                g.upper.len() == l.upper.packed().len()
                    && g.lower.len() == l.lower.packed().len()
                    && g.bias.len() == l.bias.len()
            })
    }

    pub fn matches_shape_of(&self, other: &GradientSet) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.upper.len() == b.upper.len()
                    && a.lower.len() == b.lower.len()
                    && a.bias.len() == b.bias.len()
            })
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.upper.iter().chain(&l.lower).chain(&l.bias))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers.iter_mut().flat_map(|l| {
            l.upper
                .iter_mut()
                .chain(l.lower.iter_mut())
                .chain(l.bias.iter_mut())
        })
    }

    pub fn len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.upper.len() + l.lower.len() + l.bias.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn l2_norm(&self) -> f64 {
        self.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, g| m.max(g.abs()))
    }

    pub fn scale(&mut self, factor: f64) {
        self.iter_mut().for_each(|g| *g *= factor);
    }

    /// `self += factor * other`; shapes must agree.
    pub fn add_scaled(&mut self, factor: f64, other: &GradientSet) {
        assert_eq!(self.layers.len(), other.layers.len(), "gradient depth");
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.blocks_mut().into_iter().zip(b.blocks()) {
                assert_eq!(x.len(), y.len(), "gradient block shape");
                x.iter_mut().zip(y).for_each(|(x, y)| *x += factor * y);
            }
        }
    }
}
