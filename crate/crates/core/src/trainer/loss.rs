use crate::alignment::{AlignmentMatrix, AlignmentSet};
use crate::error::{Error, Result};
use crate::tensor::{col_softmax_backward, row_softmax_backward, Tensor};

fn check_shapes(sxy: &Tensor, syx_t: &Tensor, gold: &AlignmentMatrix) -> Result<(usize, usize)> {
    let (n, m) = sxy.dims2()?;
    let g = [gold.rows(), gold.cols()];
    if syx_t.shape() != [n, m] || g != [n, m] {
        return Err(Error::Shape {
            op: "alignment_loss",
            left: sxy.shape().to_vec(),
            right: if syx_t.shape() != [n, m] { syx_t.shape().to_vec() } else { g.to_vec() },
        });
    }
    Ok((n, m))
}

/// `L = Σ_ij Â_ij · ½ (Sxy_ij / n + SyxT_ij / m)` where `n × m` is the shape of
/// all three inputs. Larger is better.
pub fn alignment_loss(sxy: &Tensor, syx_t: &Tensor, gold: &AlignmentMatrix) -> Result<f64> {
    let (n, m) = check_shapes(sxy, syx_t, gold)?;
    Ok(gold
        .ones()
        .map(|(i, j)| 0.5 * (sxy.get(i, j) as f64 / n as f64 + syx_t.get(i, j) as f64 / m as f64))
        .sum())
}

/// Gradient of `−L` with respect to the raw similarity matrix, given the two
/// softmax outputs it was computed from.
pub fn negative_loss_grad(sxy: &Tensor, syx_t: &Tensor, gold: &AlignmentMatrix) -> Result<Tensor> {
    let (n, m) = check_shapes(sxy, syx_t, gold)?;
    let mut g_row = Tensor::zeros(&[n, m]);
    let mut g_col = Tensor::zeros(&[n, m]);
    for (i, j) in gold.ones() {
        g_row.data_mut()[i * m + j] = -0.5 / n as f32;
        g_col.data_mut()[i * m + j] = -0.5 / m as f32;
    }
    let mut g = row_softmax_backward(sxy, &g_row)?;
    g.add_assign(&col_softmax_backward(syx_t, &g_col)?)?;
    Ok(g)
}

/// Expands word links (sure and possible) to every subword pair of the linked words.
pub fn gold_to_subword(
    gold: &AlignmentSet,
    src_word_map: &[usize],
    tgt_word_map: &[usize],
) -> Result<AlignmentMatrix> {
    let words = |map: &[usize]| map.last().map_or(0, |&w| w + 1);
    let (nx, ny) = (words(src_word_map), words(tgt_word_map));
    if let Some((i, j)) = gold.pairs().find(|&(i, j)| i >= nx || j >= ny) {
        return Err(Error::Data(format!(
            "gold link {i}-{j} is outside a {nx}x{ny} word grid"
        )));
    }
    Ok(AlignmentMatrix::from_fn(src_word_map.len(), tgt_word_map.len(), |a, b| {
        gold.contains(src_word_map[a], tgt_word_map[b])
    }))
}
