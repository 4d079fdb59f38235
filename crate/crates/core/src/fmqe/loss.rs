use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Symmetric contrastive loss over cosine logits scaled by `1 / tau`:
/// `-(1/S) sum_i [log softmax_row(L)_ii + log softmax_col(L)_ii]`.
///
/// `image` and `text` are `[S, D]`; `tau` is a scalar node.
pub fn contrastive_loss(g: &mut Graph, image: Var, text: Var, tau: Var) -> Result<Var> {
    let (is, ts) = (g.value(image).shape().to_vec(), g.value(text).shape().to_vec());
    if is.len() != 2 || is != ts {
        return Err(Error::shape("contrastive_loss", format!("image {is:?} vs text {ts:?}")));
    }
    let t = g.value(tau).item()?;
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")));
    }
    let s = is[0];
    let i = g.l2_normalize_rows(image);
    let tx = g.l2_normalize_rows(text);
    let cos = g.matmul_nt(i, tx)?;
    let inv = g.recip(tau);
    let logits = g.scale_by(cos, inv)?;
    let rows = g.log_softmax(logits);
    let row_diag = g.diag(rows)?;
    let cols_in = g.transpose(logits)?;
    let cols = g.log_softmax(cols_in);
    let col_diag = g.diag(cols)?;
    let both = g.add(row_diag, col_diag)?;
    let total = g.sum(both);
    Ok(g.scale(total, -1.0 / s as f64))
}

/// Mean squared error between `[S]` predictions and labels.
pub fn regression_loss(g: &mut Graph, preds: Var, labels: Var) -> Result<Var> {
    let (ps, ls) = (g.value(preds).shape().to_vec(), g.value(labels).shape().to_vec());
    if ps != ls {
        return Err(Error::shape("regression_loss", format!("predictions {ps:?} vs labels {ls:?}")));
    }
    let d = g.sub(preds, labels)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}
