use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named traversal over a module's tensors, in a fixed order.
pub trait Parameters<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn named(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |n, t| out.push((n, t)));
        out
    }

    fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}
