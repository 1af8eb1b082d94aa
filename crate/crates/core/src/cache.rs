//! The TTL-expiring price store and the auxiliary LRU cache of searched
//! itineraries that drives LRU refreshing.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::Hash;
use std::io::Write;

use crate::domain::{Itinerary, PriceQuote, Seconds};
use crate::error::{Error, Result};
use crate::io;

/// Itinerary -> newest quote. Capacity is unbounded; only TTL expires
/// entries, and an expired entry behaves exactly like a missing one.
#[derive(Debug, Clone)]
pub struct PriceDb<K = Itinerary> {
    quotes: HashMap<K, PriceQuote<K>>,
}

impl<K> Default for PriceDb<K> {
    fn default() -> Self {
        Self {
            quotes: HashMap::new(),
        }
    }
}

impl<K: Hash + Eq + Clone> PriceDb<K> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &K, now: Seconds) -> Option<&PriceQuote<K>> {
        self.quotes.get(key).filter(|q| q.is_live(now))
    }

    pub fn put(&mut self, quote: PriceQuote<K>) -> Result<()> {
        if quote.ttl <= 0 {
            return Err(Error::NonPositiveTtl(quote.ttl));
        }
        self.quotes.insert(quote.itinerary.clone(), quote);
        Ok(())
    }

    /// Number of stored quotes, live or not.
    pub fn len(&self) -> usize {
        self.quotes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quotes.is_empty()
    }

    pub fn live_count(&self, now: Seconds) -> usize {
        self.quotes.values().filter(|q| q.is_live(now)).count()
    }
}

impl PriceDb<Itinerary> {
    /// Debug dump: `hotel_id,checkin,checkout,adults,children,rooms,fetched_at,ttl,price`,
    /// sorted by itinerary.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{},fetched_at,ttl,price", io::ITINERARY_COLUMNS.join(","))?;
        let mut quotes: Vec<_> = self.quotes.values().collect();
        quotes.sort_by_key(|q| q.itinerary);
        for q in quotes {
            writeln!(
                w,
                "{},{},{},{}",
                io::format_itinerary(&q.itinerary),
                q.fetched_at,
                q.ttl,
                q.price.0
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct LruEntry {
    recency: u64,
    /// `fetched_at + ttl` of the last known quote; `Seconds::MIN` if the
    /// itinerary has never been fetched.
    expiry: Seconds,
}

/// Recency-ordered set of itineraries with the expiry of their last known
/// quote. Admission and eviction are textbook LRU; `pull_expiring` walks the
/// entries by expiry.
#[derive(Debug, Clone)]
pub struct LruSearchCache<K = Itinerary> {
    capacity: usize,
    tick: u64,
    entries: HashMap<K, LruEntry>,
    by_recency: BTreeMap<u64, K>,
    // Expiry ascending; equal expiries most-recently-used first.
    by_expiry: BTreeSet<(Seconds, Reverse<u64>, K)>,
}

impl<K: Hash + Ord + Clone> LruSearchCache<K> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            tick: 0,
            entries: HashMap::new(),
            by_recency: BTreeMap::new(),
            by_expiry: BTreeSet::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &K) -> bool {
        self.entries.contains_key(key)
    }

    pub fn expiry_of(&self, key: &K) -> Option<Seconds> {
        self.entries.get(key).map(|e| e.expiry)
    }

    /// Make `key` the most recently used entry, evicting and returning the
    /// least recently used one if capacity is exceeded.
    pub fn admit(&mut self, key: K) -> Option<K> {
        self.tick += 1;
        let recency = self.tick;
        if let Some(entry) = self.entries.get_mut(&key) {
            self.by_recency.remove(&entry.recency);
            self.by_expiry
                .remove(&(entry.expiry, Reverse(entry.recency), key.clone()));
            entry.recency = recency;
            self.by_recency.insert(recency, key.clone());
            self.by_expiry.insert((entry.expiry, Reverse(recency), key));
            return None;
        }
        let entry = LruEntry {
            recency,
            expiry: Seconds::MIN,
        };
        self.entries.insert(key.clone(), entry);
        self.by_recency.insert(recency, key.clone());
        self.by_expiry.insert((entry.expiry, Reverse(recency), key));
        if self.entries.len() > self.capacity {
            let (_, victim) = self.by_recency.pop_first().expect("nonempty");
            let e = self.entries.remove(&victim).expect("indexed entry");
            self.by_expiry
                .remove(&(e.expiry, Reverse(e.recency), victim.clone()));
            return Some(victim);
        }
        None
    }

    /// Record a fresh quote for `key` if it is cached. Recency is not touched.
    pub fn record_fetch(&mut self, key: &K, fetched_at: Seconds, ttl: Seconds) {
        if let Some(entry) = self.entries.get_mut(key) {
            let old = (entry.expiry, Reverse(entry.recency), key.clone());
            self.by_expiry.remove(&old);
            entry.expiry = fetched_at + ttl;
            self.by_expiry
                .insert((entry.expiry, Reverse(entry.recency), key.clone()));
        }
    }

    /// Up to `k` distinct cached itineraries with the smallest time to expiry
    /// at `now`: expired (or never fetched) entries first, then the soonest
    /// to expire. Ties go to the most recently used.
    pub fn pull_expiring(&self, now: Seconds, k: usize) -> Vec<K> {
        // Ordering by `expiry - now` is ordering by `expiry`.
        let _ = now;
        self.by_expiry
            .iter()
            .take(k)
            .map(|(_, _, key)| key.clone())
            .collect()
    }

    /// Keys from least to most recently used.
    pub fn keys_by_recency(&self) -> impl Iterator<Item = &K> {
        self.by_recency.values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Price;

    fn quote(key: u32, fetched_at: Seconds, ttl: Seconds, price: u64) -> PriceQuote<u32> {
        PriceQuote {
            itinerary: key,
            price: Price(price),
            fetched_at,
            ttl,
        }
    }

    #[test]
    fn live_window_boundaries() {
        let mut db = PriceDb::new();
        db.put(quote(1, 0, 100, 5)).unwrap();
        assert!(db.get(&1, 99).is_some());
        assert!(db.get(&1, 100).is_none());
        assert!(db.get(&2, 50).is_none());
    }

    #[test]
    fn newest_write_wins() {
        let mut db = PriceDb::new();
        db.put(quote(1, 0, 100, 5)).unwrap();
        db.put(quote(1, 10, 100, 7)).unwrap();
        assert_eq!(db.get(&1, 20).unwrap().price, Price(7));
        assert_eq!(db.len(), 1);
    }

    #[test]
    fn ttl_one_is_live_for_one_second() {
        let mut db = PriceDb::new();
        db.put(quote(1, 30, 1, 5)).unwrap();
        assert!(db.get(&1, 29).is_none());
        assert!(db.get(&1, 30).is_some());
        assert!(db.get(&1, 31).is_none());
    }

    #[test]
    fn nonpositive_ttl_rejected() {
        let mut db = PriceDb::new();
        assert!(matches!(db.put(quote(1, 0, 0, 5)), Err(Error::NonPositiveTtl(0))));
        assert!(db.put(quote(1, 0, -3, 5)).is_err());
        assert!(db.is_empty());
    }

    #[test]
    fn million_distinct_entries() {
        let mut db = PriceDb::new();
        for k in 0..1_000_000u32 {
            db.put(quote(k, 0, 10, 1)).unwrap();
        }
        assert_eq!(db.len(), 1_000_000);
        assert_eq!(db.live_count(5), 1_000_000);
    }

    #[test]
    fn lru_textbook_eviction() {
        let mut c = LruSearchCache::new(2);
        assert_eq!(c.admit('a'), None);
        assert_eq!(c.admit('b'), None);
        assert_eq!(c.admit('c'), Some('a'));

        let mut c = LruSearchCache::new(2);
        c.admit('a');
        c.admit('b');
        c.admit('a');
        assert_eq!(c.admit('c'), Some('b'));
    }

    #[test]
    fn readmit_does_not_evict() {
        let mut c = LruSearchCache::new(2);
        c.admit('a');
        c.admit('b');
        assert_eq!(c.admit('b'), None);
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn pull_in_expiry_order() {
        let t = 1000;
        let mut c = LruSearchCache::new(10);
        for (k, exp) in [(1u32, 5), (2, 1), (3, 9)] {
            c.admit(k);
            c.record_fetch(&k, t, exp);
        }
        assert_eq!(c.pull_expiring(t, 2), vec![2, 1]);
        assert!(c.pull_expiring(t, 0).is_empty());
        assert_eq!(c.pull_expiring(t, 10), vec![2, 1, 3]);
    }

    #[test]
    fn never_fetched_come_first_and_ties_favour_recent() {
        let mut c = LruSearchCache::new(10);
        c.admit(1u32);
        c.record_fetch(&1, 0, 50);
        c.admit(2);
        c.admit(3);
        c.admit(4);
        c.record_fetch(&4, 0, 50);
        // 2 and 3 were never fetched; 3 is more recent. 1 and 4 tie; 4 is
        // more recent.
        assert_eq!(c.pull_expiring(10, 4), vec![3, 2, 4, 1]);
    }

    #[test]
    fn record_fetch_does_not_touch_recency() {
        let mut c = LruSearchCache::new(2);
        c.admit('a');
        c.admit('b');
        c.record_fetch(&'a', 0, 10);
        assert_eq!(c.admit('c'), Some('a'));
        // Unknown keys are ignored.
        c.record_fetch(&'z', 0, 10);
        assert!(!c.contains(&'z'));
    }

    #[test]
    fn dump_is_sorted_csv() {
        use crate::domain::{HotelId, SearchCriteria};
        use chrono::NaiveDate;
        let d = NaiveDate::from_ymd_opt(2019, 10, 1).unwrap();
        let e = NaiveDate::from_ymd_opt(2019, 10, 2).unwrap();
        let it = |h| Itinerary::new(HotelId(h), SearchCriteria::new(d, e, 1, 0, 1).unwrap());
        let mut db = PriceDb::new();
        for h in [3, 1] {
            db.put(PriceQuote { itinerary: it(h), price: Price(100), fetched_at: 5, ttl: 60 })
                .unwrap();
        }
        let mut buf = Vec::new();
        db.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "hotel_id,checkin,checkout,adults,children,rooms,fetched_at,ttl,price");
        assert_eq!(lines[1], "1,2019-10-01,2019-10-02,1,0,1,5,60,100");
        assert_eq!(lines[2], "3,2019-10-01,2019-10-02,1,0,1,5,60,100");
    }

    mod props {
        use super::super::*;
        use crate::domain::Price;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn get_put_round_trip(fetched_at in -1000i64..1000, ttl in 1i64..10_000, t in -2000i64..15_000) {
                let mut db = PriceDb::new();
                db.put(PriceQuote { itinerary: 0u8, price: Price(1), fetched_at, ttl }).unwrap();
                let live = fetched_at <= t && t < fetched_at + ttl;
                prop_assert_eq!(db.get(&0, t).is_some(), live);
            }

            #[test]
            fn pull_is_nondecreasing_in_expiry(
                ops in prop::collection::vec((0u16..50, prop::option::of((0i64..500, 1i64..500))), 1..300),
                k in 0usize..60,
            ) {
                let mut c = LruSearchCache::new(25);
                for (key, fetch) in ops {
                    c.admit(key);
                    if let Some((at, ttl)) = fetch {
                        c.record_fetch(&key, at, ttl);
                    }
                }
                let pulled = c.pull_expiring(0, k);
                prop_assert_eq!(pulled.len(), k.min(c.len()));
                let expiries: Vec<_> = pulled.iter().map(|x| c.expiry_of(x).unwrap()).collect();
                prop_assert!(expiries.windows(2).all(|w| w[0] <= w[1]));
                let mut dedup = pulled.clone();
                dedup.sort();
                dedup.dedup();
                prop_assert_eq!(dedup.len(), pulled.len());
            }
        }
    }
}
