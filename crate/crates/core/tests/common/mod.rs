//! Brute-force metric oracles shared by the integration tests.
#![allow(dead_code)]

use deapsam::volume::Mask;

pub fn brute_dice(p: &Mask, g: &Mask) -> f64 {
    let both = p.data().iter().zip(g.data()).filter(|(a, b)| **a != 0 && **b != 0).count();
    let total = p.count() + g.count();
    if total == 0 {
        1.0
    } else {
        2.0 * both as f64 / total as f64
    }
}

fn surface(m: &Mask) -> Vec<[i64; 3]> {
    let [h, w, d] = m.dims().map(|x| x as i64);
    let on = |i: i64, j: i64, k: i64| {
        (0..h).contains(&i) && (0..w).contains(&j) && (0..d).contains(&k) && m.get(i as usize, j as usize, k as usize)
    };
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let exposed = !on(i + 1, j, k)
                    || !on(i - 1, j, k)
                    || !on(i, j + 1, k)
                    || !on(i, j - 1, k)
                    || !on(i, j, k + 1)
                    || !on(i, j, k - 1);
                if on(i, j, k) && exposed {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

pub fn brute_nsd(p: &Mask, g: &Mask, tau: f64) -> f64 {
    let (sp, sg) = (surface(p), surface(g));
    if sp.is_empty() && sg.is_empty() {
        return 1.0;
    }
    let near = |a: &[i64; 3], set: &[[i64; 3]]| {
        set.iter()
            .any(|b| (((a[0] - b[0]).pow(2) + (a[1] - b[1]).pow(2) + (a[2] - b[2]).pow(2)) as f64).sqrt() <= tau)
    };
    let hits = sp.iter().filter(|a| near(a, &sg)).count() + sg.iter().filter(|b| near(b, &sp)).count();
    hits as f64 / (sp.len() + sg.len()) as f64
}
