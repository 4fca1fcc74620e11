use std::collections::BTreeMap;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A set of trainable tensors addressable by stable names.
pub trait NamedParams<T: Scalar> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    /// Number of scalar parameters.
    fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |_, t| total += t.len());
        total
    }

    /// Copy every tensor out under `<prefix>.<name>`.
    fn export(&self, prefix: &str, out: &mut BTreeMap<String, Tensor<T>>) {
        self.visit_params(&mut |name, t| {
            out.insert(format!("{prefix}.{name}"), t.clone());
        });
    }
}
