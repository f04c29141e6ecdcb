use ldfc::prune::{sigmoid, str_backward, str_forward};
use ldfc::tensor::{conv2d_backward, conv2d_forward, ConvSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, v).unwrap()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// `0.5 * sum((conv(x) - t)^2)`.
fn loss(x: &Tensor<f64>, spec: &ConvSpec<f64>, t: &Tensor<f64>) -> f64 {
    let y = conv2d_forward(x, spec).unwrap();
    y.data()
        .iter()
        .zip(t.data())
        .map(|(a, b)| 0.5 * (a - b) * (a - b))
        .sum()
}

fn residual(x: &Tensor<f64>, spec: &ConvSpec<f64>, t: &Tensor<f64>) -> Tensor<f64> {
    let y = conv2d_forward(x, spec).unwrap();
    let r: Vec<f64> = y.data().iter().zip(t.data()).map(|(a, b)| a - b).collect();
    Tensor::new(y.shape().to_vec(), r).unwrap()
}

fn central(f: impl Fn(f64) -> f64, at: f64) -> f64 {
    (f(at + H) - f(at - H)) / (2.0 * H)
}

struct Case {
    name: &'static str,
    input: Vec<usize>,
    weight: Vec<usize>,
    stride: [usize; 2],
    padding: [usize; 2],
    groups: usize,
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "3x3 padded",
            input: vec![2, 3, 5, 5],
            weight: vec![4, 3, 3, 3],
            stride: [1, 1],
            padding: [1, 1],
            groups: 1,
        },
        Case {
            name: "strided",
            input: vec![2, 2, 7, 6],
            weight: vec![5, 2, 3, 2],
            stride: [2, 3],
            padding: [1, 0],
            groups: 1,
        },
        Case {
            name: "depthwise",
            input: vec![3, 4, 5, 5],
            weight: vec![4, 1, 3, 3],
            stride: [2, 2],
            padding: [1, 1],
            groups: 4,
        },
        Case {
            name: "grouped",
            input: vec![1, 6, 4, 4],
            weight: vec![4, 3, 1, 1],
            stride: [1, 1],
            padding: [0, 0],
            groups: 2,
        },
    ]
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for c in cases() {
        let x = random(&mut rng, c.input.clone());
        let spec = ConvSpec::new(
            random(&mut rng, c.weight.clone()),
            random(&mut rng, vec![c.weight[0]]),
            c.stride,
            c.padding,
            c.groups,
        )
        .unwrap();
        let y = conv2d_forward(&x, &spec).unwrap();
        let t = random(&mut rng, y.shape().to_vec());
        let g = conv2d_backward(&x, &spec, &residual(&x, &spec, &t)).unwrap();

        for i in 0..spec.weight.len() {
            let n = central(
                |v| {
                    let mut s = spec.clone();
                    s.weight.data_mut()[i] = v;
                    loss(&x, &s, &t)
                },
                spec.weight.data()[i],
            );
            assert!(
                rel_err(g.weight.data()[i], n) <= TOL,
                "{} weight {i}: {} vs {n}",
                c.name,
                g.weight.data()[i]
            );
        }
        for i in 0..spec.bias.len() {
            let n = central(
                |v| {
                    let mut s = spec.clone();
                    s.bias.data_mut()[i] = v;
                    loss(&x, &s, &t)
                },
                spec.bias.data()[i],
            );
            assert!(rel_err(g.bias.data()[i], n) <= TOL, "{} bias {i}", c.name);
        }
        for i in 0..x.len() {
            let n = central(
                |v| {
                    let mut xi = x.clone();
                    xi.data_mut()[i] = v;
                    loss(&xi, &spec, &t)
                },
                x.data()[i],
            );
            assert!(rel_err(g.input.data()[i], n) <= TOL, "{} input {i}", c.name);
        }
    }
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spec = ConvSpec::linear(random(&mut rng, vec![3, 7]), random(&mut rng, vec![3])).unwrap();
    let x = random(&mut rng, vec![5, 7, 1, 1]);
    let t = random(&mut rng, vec![5, 3, 1, 1]);
    let g = conv2d_backward(&x, &spec, &residual(&x, &spec, &t)).unwrap();
    for i in 0..spec.weight.len() {
        let n = central(
            |v| {
                let mut s = spec.clone();
                s.weight.data_mut()[i] = v;
                loss(&x, &s, &t)
            },
            spec.weight.data()[i],
        );
        assert!(rel_err(g.weight.data()[i], n) <= TOL, "weight {i}");
    }
    for i in 0..x.len() {
        let n = central(
            |v| {
                let mut xi = x.clone();
                xi.data_mut()[i] = v;
                loss(&xi, &spec, &t)
            },
            x.data()[i],
        );
        assert!(rel_err(g.input.data()[i], n) <= TOL, "input {i}");
    }
}

/// Loss of a conv whose weight is the soft-thresholded `w` at `s`.
fn str_loss(x: &Tensor<f64>, spec: &ConvSpec<f64>, w: &Tensor<f64>, s: f64, t: &Tensor<f64>) -> f64 {
    let mut st = spec.clone();
    st.weight = str_forward(w, s);
    loss(x, &st, t)
}

#[test]
fn str_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (c, s) in cases().into_iter().zip([-1.5, -0.8, -2.0, -1.0]) {
        let x = random(&mut rng, c.input.clone());
        let spec = ConvSpec::new(
            random(&mut rng, c.weight.clone()),
            random(&mut rng, vec![c.weight[0]]),
            c.stride,
            c.padding,
            c.groups,
        )
        .unwrap();
        let threshold = sigmoid(s);
        let w = spec.weight.map(|v| {
            if (v.abs() - threshold).abs() < 1e-3 {
                v + 0.01
            } else {
                v
            }
        });
        let mut active = spec.clone();
        active.weight = str_forward(&w, s);
        let y = conv2d_forward(&x, &active).unwrap();
        let t = random(&mut rng, y.shape().to_vec());
        let grad_ws = conv2d_backward(&x, &active, &residual(&x, &active, &t)).unwrap().weight;
        let (gw, gs) = str_backward(w.data(), s, grad_ws.data());
        assert!(
            active.weight.data().iter().any(|&v| v == 0.0),
            "{}: nothing thresholded",
            c.name
        );

        let n = central(|v| str_loss(&x, &spec, &w, v, &t), s);
        assert!(rel_err(gs, n) <= TOL, "{} s: {gs} vs {n}", c.name);
        for i in 0..w.len() {
            let n = central(
                |v| {
                    let mut wi = w.clone();
                    wi.data_mut()[i] = v;
                    str_loss(&x, &spec, &wi, s, &t)
                },
                w.data()[i],
            );
            if gw[i] == 0.0 {
                assert_eq!(n.abs(), 0.0, "{} inactive weight {i}", c.name);
            } else {
                assert!(rel_err(gw[i], n) <= TOL, "{} weight {i}: {} vs {n}", c.name, gw[i]);
            }
        }
    }
}
