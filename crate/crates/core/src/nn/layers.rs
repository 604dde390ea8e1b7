use rangecast_tensor::{Conv2dSpec, Var};

use super::{BnUpdate, Init, Mode, Registry, Session, BN_EPS};

pub const LEAKY_SLOPE: f64 = 0.01;

/// 2D convolution with bias; weight `(cout, cin, kh, kw)`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub spec: Conv2dSpec,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: (usize, usize), spec: Conv2dSpec) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            kernel,
            spec,
        }
    }

    /// 3x3 (optionally dilated) shape-preserving conv with circular width.
    pub fn same3(name: impl Into<String>, cin: usize, cout: usize, dilation: usize) -> Self {
        Self::new(name, cin, cout, (3, 3), Conv2dSpec::same(3, 3, dilation, true))
    }

    pub fn pointwise(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self::new(name, cin, cout, (1, 1), Conv2dSpec::valid())
    }

    pub fn register(&self, reg: &mut Registry) {
        let fan_in = self.cin * self.kernel.0 * self.kernel.1;
        let bound = 1.0 / (fan_in as f64).sqrt();
        reg.param(
            format!("{}.weight", self.name),
            &[self.cout, self.cin, self.kernel.0, self.kernel.1],
            Init::Uniform(bound),
        );
        reg.param(format!("{}.bias", self.name), &[self.cout], Init::Uniform(bound));
    }

    pub fn forward(&self, s: &Session, x: &Var) -> Var {
        let w = s.param(&format!("{}.weight", self.name));
        let b = s.param(&format!("{}.bias", self.name));
        x.conv2d(&w, Some(&b), self.spec)
    }
}

/// Transposed convolution whose kernel equals its stride; weight
/// `(cin, cout, kh, kw)`.
#[derive(Clone, Debug)]
pub struct ConvT {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub stride: (usize, usize),
}

impl ConvT {
    pub fn register(&self, reg: &mut Registry) {
        let fan_in = self.cout * self.stride.0 * self.stride.1;
        let bound = 1.0 / (fan_in as f64).sqrt();
        reg.param(
            format!("{}.weight", self.name),
            &[self.cin, self.cout, self.stride.0, self.stride.1],
            Init::Uniform(bound),
        );
        reg.param(format!("{}.bias", self.name), &[self.cout], Init::Uniform(bound));
    }

    pub fn forward(&self, s: &Session, x: &Var) -> Var {
        let w = s.param(&format!("{}.weight", self.name));
        let b = s.param(&format!("{}.bias", self.name));
        x.conv_transpose2d(&w, Some(&b), self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn register(&self, reg: &mut Registry) {
        let c = [self.channels];
        reg.param(format!("{}.gamma", self.name), &c, Init::Constant(1.0));
        reg.param(format!("{}.beta", self.name), &c, Init::Constant(0.0));
        reg.buffer(format!("{}.running_mean", self.name), &c, Init::Constant(0.0));
        reg.buffer(format!("{}.running_var", self.name), &c, Init::Constant(1.0));
    }

    pub fn forward(&self, s: &Session, x: &Var) -> Var {
        let gamma = s.param(&format!("{}.gamma", self.name));
        let beta = s.param(&format!("{}.beta", self.name));
        match s.mode() {
            Mode::Train => {
                let (y, mean, var) = x.batch_norm_train(&gamma, &beta, BN_EPS);
                let (b, _, h, w) = x.value().dims4();
                s.record_bn(BnUpdate {
                    name: self.name.clone(),
                    mean,
                    var,
                    count: b * h * w,
                });
                y
            }
            Mode::Eval => {
                let mean = s.buffer(&format!("{}.running_mean", self.name)).data();
                let var = s.buffer(&format!("{}.running_var", self.name)).data();
                x.batch_norm_eval(&gamma, &beta, mean, var, BN_EPS)
            }
        }
    }
}
