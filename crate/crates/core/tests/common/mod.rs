/// Corpus BLEU by direct n-gram list matching.
pub fn brute_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let grams = |s: &[String], n: usize| -> Vec<Vec<String>> {
        (0..(s.len() + 1).saturating_sub(n)).map(|i| s[i..i + n].to_vec()).collect()
    };
    let mut logp = 0.0;
    for n in 1..=4 {
        let (mut m, mut c, mut rn) = (0usize, 0usize, 0usize);
        for (h, r) in hyps.iter().zip(refs) {
            let hg = grams(h, n);
            let mut rg = grams(r, n);
            rn += rg.len();
            c += hg.len();
            for g in hg {
                if let Some(i) = rg.iter().position(|x| *x == g) {
                    rg.remove(i);
                    m += 1;
                }
            }
        }
        if c == 0 {
            if rn == 0 {
                continue;
            }
            return 0.0;
        }
        if m == 0 {
            return 0.0;
        }
        logp += (m as f64 / c as f64).ln() / 4.0;
    }
    let hl: usize = hyps.iter().map(Vec::len).sum();
    let rl: usize = refs.iter().map(Vec::len).sum();
    let bp = if hl >= rl {
        1.0
    } else if hl == 0 {
        0.0
    } else {
        (1.0 - rl as f64 / hl as f64).exp()
    };
    100.0 * bp * logp.exp()
}
