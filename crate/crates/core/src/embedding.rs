use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// User and item embedding matrices with binary entry masks.
///
/// A `false` mask entry is pruned: the value is held at exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub users: Matrix,
    pub items: Matrix,
    pub user_mask: Vec<bool>,
    pub item_mask: Vec<bool>,
}

impl EmbeddingTable {
    pub fn new(users: Matrix, items: Matrix) -> Result<Self> {
        if users.cols() != items.cols() {
            return Err(Error::Shape(format!(
                "user dim {} != item dim {}",
                users.cols(),
                items.cols()
            )));
        }
        let user_mask = vec![true; users.rows() * users.cols()];
        let item_mask = vec![true; items.rows() * items.cols()];
        Ok(EmbeddingTable {
            users,
            items,
            user_mask,
            item_mask,
        })
    }

    pub fn zeros(num_users: usize, num_items: usize, dim: usize) -> Self {
        Self::new(Matrix::zeros(num_users, dim), Matrix::zeros(num_items, dim)).unwrap()
    }

    /// Xavier-uniform initialization of both `N x d` tables: `U(-a, a)`, `a = sqrt(6 / (N + d))`.
    pub fn xavier<R: Rng>(num_users: usize, num_items: usize, dim: usize, rng: &mut R) -> Self {
        let bu = (6.0 / (num_users + dim) as f64).sqrt();
        let bi = (6.0 / (num_items + dim) as f64).sqrt();
        let users = Matrix::uniform(num_users, dim, bu, rng);
        let items = Matrix::uniform(num_items, dim, bi, rng);
        Self::new(users, items).unwrap()
    }

    pub fn with_masks(mut self, user_mask: Vec<bool>, item_mask: Vec<bool>) -> Result<Self> {
        if user_mask.len() != self.users.as_slice().len() || item_mask.len() != self.items.as_slice().len() {
            return Err(Error::Shape("mask length does not match embedding table".into()));
        }
        self.user_mask = user_mask;
        self.item_mask = item_mask;
        self.apply_masks();
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.users.cols()
    }

    pub fn num_users(&self) -> usize {
        self.users.rows()
    }

    pub fn num_items(&self) -> usize {
        self.items.rows()
    }

    pub fn apply_masks(&mut self) {
        for (x, &m) in self.users.as_mut_slice().iter_mut().zip(&self.user_mask) {
            if !m {
                *x = 0.0;
            }
        }
        for (x, &m) in self.items.as_mut_slice().iter_mut().zip(&self.item_mask) {
            if !m {
                *x = 0.0;
            }
        }
    }

    pub fn total_entries(&self) -> usize {
        self.user_mask.len() + self.item_mask.len()
    }

    pub fn kept_entries(&self) -> usize {
        self.user_mask.iter().chain(&self.item_mask).filter(|&&m| m).count()
    }

    pub fn kept_ratio(&self) -> f64 {
        if self.total_entries() == 0 {
            return 1.0;
        }
        self.kept_entries() as f64 / self.total_entries() as f64
    }

    pub fn user_mask_row(&self, u: usize) -> &[bool] {
        let d = self.dim();
        &self.user_mask[u * d..(u + 1) * d]
    }

    pub fn item_mask_row(&self, v: usize) -> &[bool] {
        let d = self.dim();
        &self.item_mask[v * d..(v + 1) * d]
    }

    /// Rows whose every entry is masked.
    pub fn empty_rows(&self) -> usize {
        let d = self.dim().max(1);
        self.user_mask
            .chunks(d)
            .chain(self.item_mask.chunks(d))
            .filter(|row| row.iter().all(|m| !m))
            .count()
    }

    pub fn squared_norm(&self) -> f64 {
        self.users.squared_norm() + self.items.squared_norm()
    }

    pub fn is_finite(&self) -> bool {
        self.users.is_finite() && self.items.is_finite()
    }
}
