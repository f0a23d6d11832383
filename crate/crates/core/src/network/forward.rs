use std::borrow::Cow;

use super::{ConcreteNetwork, LayerOp, LayerParams, LayerSpec, NetworkError, Value};
use crate::arch::Activation;
use crate::tensor::{
    avg_pool, batchnorm_inference, conv2d, elementwise_sum, fake_swish, global_avg_pool, max_pool,
    relu, swish, Tensor, TensorError,
};

fn activate(act: Activation, y: Tensor) -> Tensor {
    match act {
        Activation::None => y,
        Activation::Relu => relu(&y),
        Activation::Swish => swish(&y),
        Activation::FakeSwish => fake_swish(&y),
    }
}

fn run_layer(l: &LayerSpec, p: &LayerParams, ins: &[&Tensor]) -> Result<Tensor, TensorError> {
    let x: Cow<Tensor> = if ins.len() == 1 && p.gates[0] == 1.0 {
        Cow::Borrowed(ins[0])
    } else {
        Cow::Owned(elementwise_sum(ins, &p.gates)?)
    };
    match l.op {
        LayerOp::Conv(spec) => {
            let c = p.conv.as_ref().expect("conv layers carry parameters");
            let mut y = conv2d(&x, &c.weight, c.bias.as_deref(), spec.stride, spec.padding)?;
            if let Some(bn) = &c.bn {
                y = batchnorm_inference(&y, bn)?;
            }
            Ok(activate(spec.activation, y))
        }
        LayerOp::MaxPool(s) => max_pool(&x, s.kernel, s.stride, s.padding),
        LayerOp::AvgPool(s) => avg_pool(&x, s.kernel, s.stride, s.padding),
        LayerOp::Sum => Ok(x.into_owned()),
        LayerOp::GlobalAvgPool => Ok(global_avg_pool(&x)),
    }
}

/// Output of every layer, in layer order.
pub fn forward_trace(net: &ConcreteNetwork, x: &Tensor) -> Result<Vec<Tensor>, NetworkError> {
    let [_, c, h, w] = x.shape();
    if [c, h, w] != net.input_shape() {
        return Err(NetworkError::InputShape {
            got: [c, h, w],
            want: net.input_shape(),
        });
    }
    let mut outs: Vec<Tensor> = Vec::with_capacity(net.layers().len());
    for (l, p) in net.layers().iter().zip(net.params()) {
        let ins: Vec<&Tensor> = l
            .inputs
            .iter()
            .map(|v| match *v {
                Value::Input => x,
                Value::Layer(i) => &outs[i],
            })
            .collect();
        let y = run_layer(l, p, &ins).map_err(|source| NetworkError::Tensor {
            layer: l.name(),
            source,
        })?;
        outs.push(y);
    }
    Ok(outs)
}

/// Logits, shaped `(n, classes, 1, 1)`.
pub fn forward(net: &ConcreteNetwork, x: &Tensor) -> Result<Tensor, NetworkError> {
    let mut outs = forward_trace(net, x)?;
    Ok(outs.pop().expect("networks end in a classifier"))
}

/// Scalar objective for gradient checks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Loss {
    SumLogits,
    /// Sum of one named layer's output.
    SumLayer(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamTensor {
    Weight,
    Bias,
    Gates,
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSelector {
    pub layer: String,
    pub tensor: ParamTensor,
    /// Flat indices into the selected tensor.
    pub indices: Vec<usize>,
}

fn param_slice(p: &mut LayerParams, t: ParamTensor) -> Option<&mut [f64]> {
    if t == ParamTensor::Gates {
        return Some(&mut p.gates);
    }
    let c = p.conv.as_mut()?;
    match t {
        ParamTensor::Weight => Some(c.weight.data_mut()),
        ParamTensor::Bias => c.bias.as_deref_mut(),
        ParamTensor::BnGamma => c.bn.as_mut().map(|b| b.gamma.as_mut_slice()),
        ParamTensor::BnBeta => c.bn.as_mut().map(|b| b.beta.as_mut_slice()),
        ParamTensor::BnMean => c.bn.as_mut().map(|b| b.mean.as_mut_slice()),
        ParamTensor::BnVar => c.bn.as_mut().map(|b| b.var.as_mut_slice()),
        ParamTensor::Gates => unreachable!(),
    }
}

fn evaluate(net: &ConcreteNetwork, x: &Tensor, loss: &Loss, layer: Option<usize>) -> Result<f64, NetworkError> {
    match (loss, layer) {
        (Loss::SumLayer(_), Some(i)) => Ok(forward_trace(net, x)?[i].sum()),
        _ => Ok(forward(net, x)?.sum()),
    }
}

/// Central differences `(L(θ+h) - L(θ-h)) / 2h`, one per selected index.
pub fn numeric_gradient(
    net: &ConcreteNetwork,
    x: &Tensor,
    loss: &Loss,
    selector: &ParamSelector,
    h: f64,
) -> Result<Vec<f64>, NetworkError> {
    let li = net.find_layer(&selector.layer)?;
    let loss_layer = match loss {
        Loss::SumLayer(name) => Some(net.find_layer(name)?),
        Loss::SumLogits => None,
    };
    let mut probe = net.clone();
    let len = param_slice(&mut probe.params[li], selector.tensor)
        .ok_or_else(|| {
            NetworkError::Selector(format!("{} has no {:?} tensor", selector.layer, selector.tensor))
        })?
        .len();
    if let Some(&bad) = selector.indices.iter().find(|&&i| i >= len) {
        return Err(NetworkError::Selector(format!(
            "index {bad} out of range for {:?} of {} ({len} entries)",
            selector.tensor, selector.layer
        )));
    }
    let mut grads = Vec::with_capacity(selector.indices.len());
    for &i in &selector.indices {
        let base = param_slice(&mut probe.params[li], selector.tensor).unwrap()[i];
        param_slice(&mut probe.params[li], selector.tensor).unwrap()[i] = base + h;
        let up = evaluate(&probe, x, loss, loss_layer)?;
        param_slice(&mut probe.params[li], selector.tensor).unwrap()[i] = base - h;
        let down = evaluate(&probe, x, loss, loss_layer)?;
        param_slice(&mut probe.params[li], selector.tensor).unwrap()[i] = base;
        grads.push((up - down) / (2.0 * h));
    }
    Ok(grads)
}
