//! The angle-aware state layout shared by the ground-truth systems and the
//! learned latent dynamics: s = (r, cos phi, sin phi, rdot, phidot),
//! partitioned into blocks s1..s5. Translational and rotational coordinates
//! keep their original coordinate order within their blocks.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordKind {
    Translational,
    Rotational,
}

/// Block layout derived from the coordinate kinds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateLayout {
    kinds: Vec<CoordKind>,
    m_r: usize,
    m_t: usize,
}

impl StateLayout {
    pub fn new(kinds: &[CoordKind]) -> StateLayout {
        let m_r = kinds.iter().filter(|k| **k == CoordKind::Translational).count();
        let m_t = kinds.len() - m_r;
        StateLayout { kinds: kinds.to_vec(), m_r, m_t }
    }

    pub fn kinds(&self) -> &[CoordKind] {
        &self.kinds
    }

    pub fn dof(&self) -> usize {
        self.kinds.len()
    }

    pub fn m_r(&self) -> usize {
        self.m_r
    }

    pub fn m_t(&self) -> usize {
        self.m_t
    }

    /// Full state dimension: m_r + 2 m_t + m_r + m_t.
    pub fn dim(&self) -> usize {
        2 * self.m_r + 3 * self.m_t
    }

    /// Dimension of the configuration part (s1, s2, s3).
    pub fn q_dim(&self) -> usize {
        self.m_r + 2 * self.m_t
    }

    pub fn s1_range(&self) -> std::ops::Range<usize> {
        0..self.m_r
    }

    pub fn s2_range(&self) -> std::ops::Range<usize> {
        self.m_r..self.m_r + self.m_t
    }

    pub fn s3_range(&self) -> std::ops::Range<usize> {
        self.m_r + self.m_t..self.m_r + 2 * self.m_t
    }

    pub fn s4_range(&self) -> std::ops::Range<usize> {
        self.q_dim()..self.q_dim() + self.m_r
    }

    pub fn s5_range(&self) -> std::ops::Range<usize> {
        self.q_dim() + self.m_r..self.dim()
    }

    /// Position of coordinate `j` within its kind block.
    pub fn block_index(&self, j: usize) -> usize {
        let kind = self.kinds[j];
        self.kinds[..j].iter().filter(|k| **k == kind).count()
    }

    /// Pack (q, qdot) into the angle-aware state vector.
    pub fn pack(&self, q: &[f64], qdot: &[f64]) -> Vec<f64> {
        assert_eq!(q.len(), self.dof());
        assert_eq!(qdot.len(), self.dof());
        let mut s = vec![0.0; self.dim()];
        for (j, kind) in self.kinds.iter().enumerate() {
            let b = self.block_index(j);
            match kind {
                CoordKind::Translational => {
                    s[self.s1_range()][b] = q[j];
                    s[self.s4_range()][b] = qdot[j];
                }
                CoordKind::Rotational => {
                    s[self.s2_range()][b] = q[j].cos();
                    s[self.s3_range()][b] = q[j].sin();
                    s[self.s5_range()][b] = qdot[j];
                }
            }
        }
        s
    }

    /// Recover (q, qdot) from a state vector; angles via atan2 in (-pi, pi].
    pub fn unpack(&self, s: &[f64]) -> (Vec<f64>, Vec<f64>) {
        assert_eq!(s.len(), self.dim());
        let mut q = vec![0.0; self.dof()];
        let mut qdot = vec![0.0; self.dof()];
        for (j, kind) in self.kinds.iter().enumerate() {
            let b = self.block_index(j);
            match kind {
                CoordKind::Translational => {
                    q[j] = s[self.s1_range()][b];
                    qdot[j] = s[self.s4_range()][b];
                }
                CoordKind::Rotational => {
                    let c = s[self.s2_range()][b];
                    let sn = s[self.s3_range()][b];
                    q[j] = sn.atan2(c);
                    qdot[j] = s[self.s5_range()][b];
                }
            }
        }
        (q, qdot)
    }

    /// Generalized velocities (s4, s5) in coordinate order.
    pub fn qdot_of(&self, s: &[f64]) -> Vec<f64> {
        self.unpack(s).1
    }

    /// Largest deviation of any (cos, sin) pair from the unit circle.
    pub fn circle_defect(&self, s: &[f64]) -> f64 {
        let s2 = &s[self.s2_range()];
        let s3 = &s[self.s3_range()];
        s2.iter()
            .zip(s3)
            .fold(0.0f64, |m, (c, sn)| m.max((c * c + sn * sn - 1.0).abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_unpack_roundtrip() {
        let layout = StateLayout::new(&[CoordKind::Translational, CoordKind::Rotational]);
        assert_eq!(layout.dim(), 5);
        assert_eq!(layout.q_dim(), 3);
        let q = [0.4, 2.0];
        let qd = [-1.0, 0.5];
        let s = layout.pack(&q, &qd);
        let (q2, qd2) = layout.unpack(&s);
        for (a, b) in q.iter().zip(&q2) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(qd.to_vec(), qd2);
        assert!(layout.circle_defect(&s) < 1e-15);
    }

    #[test]
    fn block_layout_of_acrobot_like_system() {
        let layout = StateLayout::new(&[CoordKind::Rotational, CoordKind::Rotational]);
        assert_eq!((layout.m_r(), layout.m_t(), layout.dim()), (0, 2, 6));
        assert_eq!(layout.s2_range(), 0..2);
        assert_eq!(layout.s5_range(), 4..6);
    }
}
