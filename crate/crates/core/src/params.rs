//! Named parameter traversal shared by the optimiser, checkpoints and
//! gradient checks.

use crate::tensor::Tensor;

pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

macro_rules! impl_parameters {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::params::Parameters for $ty {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a $crate::tensor::Tensor)) {
                $( f($crate::params::join(prefix, stringify!($field)), &self.$field); )*
            }
            fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut $crate::tensor::Tensor)) {
                $( f($crate::params::join(prefix, stringify!($field)), &mut self.$field); )*
            }
        }
    };
}
pub(crate) use impl_parameters;

impl<P: Parameters> Parameters for Vec<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<P: Parameters> Parameters for Option<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        if let Some(p) = self {
            p.visit(prefix, f);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        if let Some(p) = self {
            p.visit_mut(prefix, f);
        }
    }
}

pub fn named<P: Parameters + ?Sized>(p: &P, prefix: &str) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    p.visit(prefix, &mut |n, t| out.push((n, t.clone())));
    out
}

pub fn names<P: Parameters + ?Sized>(p: &P, prefix: &str) -> Vec<String> {
    let mut out = Vec::new();
    p.visit(prefix, &mut |n, _| out.push(n));
    out
}

pub fn tensors<P: Parameters + ?Sized>(p: &P) -> Vec<&Tensor> {
    let mut out = Vec::new();
    p.visit("", &mut |_, t| out.push(t));
    out
}

pub fn tensors_mut<P: Parameters + ?Sized>(p: &mut P) -> Vec<&mut Tensor> {
    let mut out = Vec::new();
    p.visit_mut("", &mut |_, t| out.push(t));
    out
}

pub fn count<P: Parameters + ?Sized>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, t| n += t.len());
    n
}

pub fn zeros_like<P: Parameters + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.visit_mut("", &mut |_, t| t.fill(0.0));
    z
}

/// Overwrite parameters, in traversal order, from `values`.
pub fn assign<P: Parameters + ?Sized>(p: &mut P, values: &[Tensor]) {
    let mut it = values.iter();
    p.visit_mut("", &mut |n, t| {
        let v = it.next().unwrap_or_else(|| panic!("missing value for {n}"));
        assert_eq!(t.shape(), v.shape(), "shape of {n}");
        t.data_mut().copy_from_slice(v.data());
    });
    assert!(it.next().is_none(), "too many parameter values");
}

/// `acc += other`, tensor by tensor.
pub fn accumulate<P: Parameters + ?Sized>(acc: &mut P, other: &P) {
    let src = tensors(other);
    let mut i = 0;
    acc.visit_mut("", &mut |_, t| {
        t.add_assign(src[i]);
        i += 1;
    });
}
