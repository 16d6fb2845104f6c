//! Build a small logistic-regression loss on the reverse-mode tape, read off
//! its gradients, and confirm them with finite differences.
//!
//! ```bash
//! cargo run --example autodiff_tape
//! ```

use outcome_align::ndcore::{finite_difference_gradient, max_relative_discrepancy, DenseArray, Tape};

fn loss(tape: &mut Tape, x: &DenseArray, w: &DenseArray, y: &DenseArray, w_is_param: bool) -> outcome_align::Result<(f64, Option<DenseArray>)> {
    let xs = tape.constant(x.clone());
    let ws = if w_is_param { tape.param(w.clone()) } else { tape.constant(w.clone()) };
    let ys = tape.constant(y.clone());
    let logits = tape.matmul(xs, ws)?;
    let p = tape.sigmoid(logits)?;
    let p = tape.clamp(p, 1e-7, 1.0 - 1e-7)?;
    let diff = tape.sub(p, ys)?;
    let sq = tape.square(diff)?;
    let l = tape.mean(sq)?;
    let value = tape.value(l).item();
    if !w_is_param {
        return Ok((value, None));
    }
    let grads = tape.backward(l)?;
    Ok((value, grads.get(ws).cloned()))
}

fn main() -> outcome_align::Result<()> {
    let x = DenseArray::from_rows(4, 2, vec![1.0, 0.5, -0.3, 2.0, 0.8, -1.2, 0.0, 0.4])?;
    let y = DenseArray::column(&[1.0, 0.0, 1.0, 0.0]);
    let w = DenseArray::column(&[0.7, -0.2]);

    let mut tape = Tape::new();
    let (value, grad) = loss(&mut tape, &x, &w, &y, true)?;
    let grad = grad.expect("w is a parameter");
    println!("loss {value:.6}  ({} nodes on the tape)", tape.len());
    println!("analytic gradient {:.6?}", grad.data());

    let numeric = finite_difference_gradient(
        |w| loss(&mut Tape::new(), &x, w, &y, false).map(|(v, _)| v),
        &w,
        1e-5,
    )?;
    println!("numeric gradient  {:.6?}", numeric.data());
    println!("max relative discrepancy {:.2e}", max_relative_discrepancy(grad.data(), numeric.data()));
    Ok(())
}
