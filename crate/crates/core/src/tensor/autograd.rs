use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::cell::Cell;
use std::collections::{HashMap, HashSet};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Run `f` without recording backward edges (inference / finite differences).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

/// Ordered record of the operations reachable from a root tensor, in
/// execution (topological) order. Replaying adjoints over it in reverse
/// populates the gradient slot of every reachable leaf.
pub struct Tape<T: Scalar> {
    order: Vec<Tensor<T>>,
    root: Tensor<T>,
}

impl<T: Scalar> Tape<T> {
    pub fn record(root: &Tensor<T>) -> Tape<T> {
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        // iterative post-order: (tensor, next child index)
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(root.clone(), 0)];
        seen.insert(root.id());
        while let Some((t, ci)) = stack.pop() {
            let parents = t.node().map(|n| n.parents.as_slice()).unwrap_or(&[]);
            if ci < parents.len() {
                let child = parents[ci].clone();
                stack.push((t, ci + 1));
                if child.requires_lineage() && seen.insert(child.id()) {
                    stack.push((child, 0));
                }
            } else {
                order.push(t);
            }
        }
        Tape {
            order,
            root: root.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Reverse sweep: seeds the root adjoint with 1 and accumulates into
    /// every reachable gradient slot. Repeated sweeps accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.root.numel() != 1 {
            return Err(Error::usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.root.shape()
            )));
        }
        let mut adjoint: HashMap<u64, Vec<T>> = HashMap::new();
        adjoint.insert(self.root.id(), vec![T::ONE]);

        for t in self.order.iter().rev() {
            let Some(g) = adjoint.remove(&t.id()) else {
                continue;
            };
            if let Some(slot) = t.grad_slot() {
                slot.accumulate(&g);
            }
            let Some(node) = t.node() else { continue };

            // hand each parent occurrence its own buffer, then merge, so an
            // op that uses the same tensor twice accumulates both shares
            let mut bufs: Vec<Option<Vec<T>>> = Vec::with_capacity(node.parents.len());
            for p in &node.parents {
                if p.requires_lineage() {
                    bufs.push(Some(
                        adjoint
                            .remove(&p.id())
                            .unwrap_or_else(|| vec![T::ZERO; p.numel()]),
                    ));
                } else {
                    bufs.push(None);
                }
            }
            (node.backward)(&g, &mut bufs);
            for (p, buf) in node.parents.iter().zip(bufs.into_iter()) {
                if let Some(b) = buf {
                    match adjoint.entry(p.id()) {
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            for (dst, src) in e.get_mut().iter_mut().zip(&b) {
                                *dst += *src;
                            }
                        }
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(b);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Record and sweep in one call.
pub fn backward<T: Scalar>(loss: &Tensor<T>) -> Result<()> {
    Tape::record(loss).backward()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_requires_scalar_root() {
        let x = Tensor::<f64>::zeros(vec![2]).requires_grad();
        let y = x.add(&x).unwrap();
        assert!(matches!(backward(&y), Err(Error::Usage(_))));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::<f64>::new(vec![4], vec![1.0, -2.0, 3.0, 0.5])
            .unwrap()
            .requires_grad();
        let s = x.sum_all();
        backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn sigmoid_grad_at_zero_is_quarter() {
        let x = Tensor::<f64>::zeros(vec![3]).requires_grad();
        let s = x.sigmoid().sum_all();
        backward(&s).unwrap();
        for g in x.grad().unwrap() {
            assert!((g - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn detached_parameter_gets_no_grad() {
        let x = Tensor::<f64>::full(vec![2], 1.0).requires_grad();
        let y = Tensor::<f64>::full(vec![2], 2.0).requires_grad();
        let s = x.sum_all();
        backward(&s).unwrap();
        assert!(y.grad().is_none());
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::full(vec![2], 3.0).requires_grad();
        let s = x.sum_all();
        let tape = Tape::record(&s);
        tape.backward().unwrap();
        tape.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn same_tensor_used_twice_gets_both_shares() {
        // d(x*x)/dx = 2x
        let x = Tensor::<f64>::new(vec![2], vec![3.0, -1.5])
            .unwrap()
            .requires_grad();
        let y = x.mul(&x).unwrap().sum_all();
        backward(&y).unwrap();
        let g = x.grad().unwrap();
        assert!((g[0] - 6.0).abs() < 1e-12);
        assert!((g[1] + 3.0).abs() < 1e-12);
    }

    #[test]
    fn no_grad_suppresses_recording() {
        let x = Tensor::<f64>::full(vec![2], 1.0).requires_grad();
        let y = no_grad(|| x.sigmoid());
        assert!(y.node().is_none());
    }
}
