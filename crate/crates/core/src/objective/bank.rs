use crate::error::{LabError, Result};
use crate::numerics::{RngStream, Tensor};

/// Rows must be unit-norm within this tolerance to enter the bank.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Fixed-capacity FIFO ring of unit-norm encodings.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    slots: Tensor,
    cursor: usize,
    fill: usize,
}

impl MemoryBank {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(LabError::Config(format!(
                "memory bank needs positive capacity and dim, got {capacity}x{dim}"
            )));
        }
        Ok(MemoryBank {
            slots: Tensor::zeros(&[capacity, dim]),
            cursor: 0,
            fill: 0,
        })
    }

    /// A full bank of normalized Gaussian vectors.
    pub fn random(capacity: usize, dim: usize, rng: &mut RngStream) -> Result<Self> {
        let mut bank = Self::new(capacity, dim)?;
        for i in 0..capacity {
            let row = bank.slots.row_mut(i);
            loop {
                row.iter_mut().for_each(|v| *v = rng.normal());
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 1e-6 {
                    row.iter_mut().for_each(|v| *v /= n);
                    break;
                }
            }
        }
        bank.fill = capacity;
        Ok(bank)
    }

    pub fn capacity(&self) -> usize {
        self.slots.rows()
    }

    pub fn dim(&self) -> usize {
        self.slots.cols()
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    /// Slot `i` in physical ring order.
    pub fn slot(&self, i: usize) -> &[f64] {
        self.slots.row(i)
    }

    /// Copy of the filled region in physical slot order; used as negatives.
    pub fn negatives(&self) -> Tensor {
        let idx: Vec<usize> = (0..self.fill).collect();
        self.slots.select_rows(&idx)
    }

    /// Filled rows from oldest to newest.
    pub fn oldest_first(&self) -> Tensor {
        let k = self.capacity();
        let start = if self.fill < k { 0 } else { self.cursor };
        let idx: Vec<usize> = (0..self.fill).map(|i| (start + i) % k).collect();
        self.slots.select_rows(&idx)
    }

    /// FIFO insertion of every row of `batch`, evicting the oldest when full.
    pub fn enqueue(&mut self, batch: &Tensor) -> Result<()> {
        if batch.cols() != self.dim() {
            return Err(LabError::shape("bank_enqueue", batch.shape(), self.slots.shape()));
        }
        for i in 0..batch.rows() {
            let n = batch.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if !((n - 1.0).abs() <= UNIT_NORM_TOL) {
                return Err(LabError::Integrity(format!(
                    "bank row {i} has norm {n}, expected 1"
                )));
            }
        }
        let k = self.capacity();
        for i in 0..batch.rows() {
            self.slots.row_mut(self.cursor).copy_from_slice(batch.row(i));
            self.cursor = (self.cursor + 1) % k;
            self.fill = (self.fill + 1).min(k);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    fn tagged(tag: usize) -> Vec<f64> {
        let a = tag as f64 * 0.1;
        vec![a.cos(), a.sin()]
    }

    fn push(bank: &mut MemoryBank, tags: &[usize]) {
        let rows: Vec<Vec<f64>> = tags.iter().map(|&t| tagged(t)).collect();
        bank.enqueue(&Tensor::from_rows(&rows).unwrap()).unwrap();
    }

    #[test]
    fn fifo_keeps_last_k() {
        let mut bank = MemoryBank::new(4, 2).unwrap();
        push(&mut bank, &[1, 2, 3, 4, 5, 6]);
        let expect: Vec<Vec<f64>> = [3, 4, 5, 6].iter().map(|&t| tagged(t)).collect();
        assert_eq!(bank.oldest_first(), Tensor::from_rows(&expect).unwrap());
        assert_eq!(bank.slot(0), tagged(5).as_slice());
        assert_eq!(bank.fill(), 4);
    }

    #[test]
    fn exactly_k_wraps_cursor() {
        let mut bank = MemoryBank::new(4, 2).unwrap();
        push(&mut bank, &[1, 2, 3, 4]);
        assert_eq!((bank.fill(), bank.cursor()), (4, 0));
    }

    #[test]
    fn non_unit_row_rejected() {
        let mut bank = MemoryBank::new(4, 2).unwrap();
        let bad = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert!(matches!(bank.enqueue(&bad), Err(LabError::Integrity(_))));
        assert!(bank.is_empty());
    }

    #[test]
    fn matches_deque_over_many_ops() {
        let mut rng = RngStream::new(9);
        let mut bank = MemoryBank::new(7, 2).unwrap();
        let mut oracle: VecDeque<usize> = VecDeque::new();
        let mut next = 0;
        for _ in 0..1000 {
            let b = rng.below(4);
            let tags: Vec<usize> = (next..next + b).collect();
            next += b;
            if b > 0 {
                push(&mut bank, &tags);
            }
            for t in tags {
                oracle.push_back(t);
                if oracle.len() > 7 {
                    oracle.pop_front();
                }
            }
            let rows: Vec<Vec<f64>> = oracle.iter().map(|&t| tagged(t)).collect();
            if rows.is_empty() {
                assert!(bank.is_empty());
            } else {
                assert_eq!(bank.oldest_first(), Tensor::from_rows(&rows).unwrap());
            }
        }
    }

    #[test]
    fn random_bank_is_full_and_unit() {
        let bank = MemoryBank::random(16, 5, &mut RngStream::new(1)).unwrap();
        assert_eq!(bank.fill(), 16);
        for i in 0..16 {
            let n: f64 = bank.slot(i).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
