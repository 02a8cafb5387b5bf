//! Exact integer combinatorics shared across the crate.
//!
//! Everything here stays in `u128` until the caller converts; rate formulas
//! multiply these counts into floating point exactly once.

/// Binomial coefficient C(n, k).
pub(crate) fn binomial(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // Multiply before dividing keeps every intermediate an integer.
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Falling factorial n * (n-1) * ... * (n-k+1); zero when k > n.
pub(crate) fn falling(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    (0..k).map(|i| (n - i) as u128).product()
}

/// Factorial; callers guard n <= 33 (34! overflows u128).
pub(crate) fn factorial(n: u64) -> u128 {
    assert!(n <= 33, "factorial overflow guard");
    (1..=n as u128).product()
}

/// Bell numbers B(0)..B(n) via the Bell triangle.
pub(crate) fn bell_numbers(n: usize) -> Vec<u128> {
    let mut bell = vec![1u128];
    let mut row = vec![1u128];
    for _ in 1..=n {
        let mut next = Vec::with_capacity(row.len() + 1);
        next.push(*row.last().unwrap());
        for &x in &row {
            let last = *next.last().unwrap();
            next.push(last + x);
        }
        bell.push(next[0]);
        row = next;
    }
    bell.truncate(n + 1);
    bell
}

/// All set partitions of {0, 1, ..., n-1}, each partition as blocks of
/// ascending indices, blocks ordered by least element (restricted-growth
/// enumeration).
pub(crate) fn set_partitions(n: usize) -> Vec<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    if n == 0 {
        out.push(Vec::new());
        return out;
    }
    // rgs[i] = block index of element i; rgs[i] <= 1 + max(rgs[..i]).
    let mut rgs = vec![0usize; n];
    loop {
        let blocks = rgs.iter().copied().max().unwrap() + 1;
        let mut part = vec![Vec::new(); blocks];
        for (i, &b) in rgs.iter().enumerate() {
            part[b].push(i);
        }
        out.push(part);
        // Next restricted-growth string.
        let mut i = n - 1;
        loop {
            if i == 0 {
                return out;
            }
            let max_prefix = rgs[..i].iter().copied().max().unwrap();
            if rgs[i] <= max_prefix {
                rgs[i] += 1;
                for v in rgs[i + 1..].iter_mut() {
                    *v = 0;
                }
                break;
            }
            i -= 1;
        }
    }
}

/// Integer partitions of n into parts >= min_part, each partition descending.
pub(crate) fn integer_partitions(n: u32, min_part: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    fn rec(remaining: u32, max_part: u32, min_part: u32, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if remaining == 0 {
            out.push(current.clone());
            return;
        }
        let mut p = max_part.min(remaining);
        while p >= min_part {
            current.push(p);
            rec(remaining - p, p, min_part, current, out);
            current.pop();
            if p == min_part {
                break;
            }
            p -= 1;
        }
    }
    rec(n, n, min_part, &mut current, &mut out);
    out
}

/// Number of set partitions of a k-set with the given block-size profile:
/// k! / (prod sizes! * prod multiplicity-of-equal-size!).
pub(crate) fn profile_partition_count(sizes: &[u32]) -> u128 {
    let k: u64 = sizes.iter().map(|&s| s as u64).sum();
    let mut count = factorial(k);
    for &s in sizes {
        count /= factorial(s as u64);
    }
    let mut sorted = sizes.to_vec();
    sorted.sort_unstable();
    let mut run = 1u64;
    for i in 1..=sorted.len() {
        if i < sorted.len() && sorted[i] == sorted[i - 1] {
            run += 1;
        } else {
            count /= factorial(run);
            run = 1;
        }
    }
    count
}

/// All ways to partition `items` into unordered blocks with the given size
/// profile. Sizes are grouped into equal-size classes; each class picks its
/// elements, and within a class every block starts with the least element
/// still unassigned in that class, which deduplicates equal-size blocks.
pub(crate) fn partitions_with_profile(items: &[usize], sizes: &[u32]) -> Vec<Vec<Vec<usize>>> {
    let mut sorted = sizes.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    // (block size, how many blocks of that size).
    let mut classes: Vec<(usize, usize)> = Vec::new();
    for &s in &sorted {
        match classes.last_mut() {
            Some((size, count)) if *size == s as usize => *count += 1,
            _ => classes.push((s as usize, 1)),
        }
    }
    let mut out = Vec::new();
    let mut current: Vec<Vec<usize>> = Vec::new();
    fn split_class(
        pool: &[usize],
        size: usize,
        count: usize,
        current: &mut Vec<Vec<usize>>,
        then: &mut dyn FnMut(&mut Vec<Vec<usize>>),
    ) {
        if count == 0 {
            debug_assert!(pool.is_empty());
            then(current);
            return;
        }
        let first = pool[0];
        let rest = &pool[1..];
        for combo in combinations(rest, size - 1) {
            let mut block = vec![first];
            block.extend(&combo);
            let next: Vec<usize> = rest.iter().copied().filter(|x| !combo.contains(x)).collect();
            current.push(block);
            split_class(&next, size, count - 1, current, then);
            current.pop();
        }
    }
    fn rec(
        remaining: &[usize],
        classes: &[(usize, usize)],
        current: &mut Vec<Vec<usize>>,
        out: &mut Vec<Vec<Vec<usize>>>,
    ) {
        match classes.split_first() {
            None => {
                debug_assert!(remaining.is_empty());
                out.push(current.clone());
            }
            Some((&(size, count), rest_classes)) => {
                for chosen in combinations(remaining, size * count) {
                    let rest: Vec<usize> =
                        remaining.iter().copied().filter(|x| !chosen.contains(x)).collect();
                    split_class(&chosen, size, count, current, &mut |cur| {
                        rec(&rest, rest_classes, cur, out)
                    });
                }
            }
        }
    }
    rec(items, &classes, &mut current, &mut out);
    out
}

/// k-element subsets of `items`, preserving order.
pub(crate) fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > items.len() {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.iter().map(|&i| items[i]).collect());
        // Advance the combination cursor.
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + items.len() - k {
                idx[i] += 1;
                for j in i + 1..k {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
            if i == 0 {
                return out;
            }
        }
    }
}
