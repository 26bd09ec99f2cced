//! Build a two-layer perceptron on the tape, back-propagate a softmax
//! cross-entropy and confirm the gradients with central differences.

use vlp::tensor::gradcheck::{check_gradients, GradCheckConfig};
use vlp::tensor::{Graph, ParamStore, Tensor};

fn main() -> vlp::Result<()> {
    let mut store = ParamStore::<f64>::new();
    let w1 = store.add("w1", Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?)?;
    let b1 = store.add("b1", Tensor::vector(vec![0.1, -0.2, 0.0, 0.3])?)?;
    let w2 = store.add("w2", Tensor::matrix(4, 2, (0..8).map(|i| (i as f64 * 0.91).cos()).collect())?)?;
    let x = Tensor::matrix(2, 3, vec![1.0, -0.5, 0.25, 0.0, 2.0, -1.0])?;

    let loss = |g: &mut Graph<f64>, p: &ParamStore<f64>| {
        let xi = g.input(x.clone());
        let (w1, b1, w2) = (g.param(p, w1), g.param(p, b1), g.param(p, w2));
        let h = g.matmul(xi, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.tanh(h);
        let z = g.matmul(h, w2)?;
        g.nll_rows(z, &[0, 1]).map(|n| g.mean_all(n))
    };

    let mut g = Graph::new();
    let l = loss(&mut g, &store)?;
    let grads = g.backward_params(l, &store)?;
    println!("loss {:.6}", g.scalar(l));
    for id in store.ids() {
        println!("d/d{} = {:?}", store.name(id), grads.get(id).map(|t| t.data().to_vec()));
    }
    let report = check_gradients(&store, loss, &GradCheckConfig::default())?;
    print!("{}", report.render());
    Ok(())
}
