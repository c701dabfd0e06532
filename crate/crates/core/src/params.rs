//! Named parameter records that are generic over what each slot holds:
//! weights (`Tensor`), tape handles (`Var`) or gradients (`Tensor` again).

macro_rules! param_record {
    ($(#[$meta:meta])* $name:ident { $($field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<P> {
            $(pub $field: P,)*
        }

        impl<P> $name<P> {
            pub const NAMES: &'static [&'static str] = &[$(stringify!($field)),*];

            pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> $name<Q> {
                $name { $($field: f(&self.$field),)* }
            }

            pub fn try_map<Q, E>(
                &self,
                mut f: impl FnMut(&'static str, &P) -> Result<Q, E>,
            ) -> Result<$name<Q>, E> {
                Ok($name { $($field: f(stringify!($field), &self.$field)?,)* })
            }

            /// Builds a record from values in `NAMES` order; `None` on a count mismatch.
            pub fn from_fields(values: impl IntoIterator<Item = P>) -> Option<Self> {
                let mut it = values.into_iter();
                let record = $name { $($field: it.next()?,)* };
                it.next().is_none().then_some(record)
            }

            pub fn fields(&self) -> Vec<(&'static str, &P)> {
                vec![$((stringify!($field), &self.$field),)*]
            }

            pub fn fields_mut(&mut self) -> Vec<(&'static str, &mut P)> {
                vec![$((stringify!($field), &mut self.$field),)*]
            }
        }
    };
}

pub(crate) use param_record;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

/// Normal(0, std) samples redrawn until they fall within two standard deviations.
pub(crate) fn trunc_normal<T: Scalar, R: Rng + ?Sized>(
    dims: impl Into<Vec<usize>>,
    std: f64,
    rng: &mut R,
) -> Tensor<T> {
    let dims = dims.into();
    let n: usize = dims.iter().product();
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::from_f64_lossy(v);
            }
        })
        .collect();
    Tensor::new(dims, data).expect("dims match data")
}
