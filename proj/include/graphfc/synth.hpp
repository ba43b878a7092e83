#pragma once

// Synthetic customs-transaction generator. Plants three recoverable signal
// sources: per-importer latent risk, per-HS-code latent risk, and a row-level
// undervaluation signal carried by the declared unit value. Risky importers
// also shift their declared prices downward, so aggregating a trader's other
// transactions genuinely denoises its risk estimate.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "graphfc/common.hpp"
#include "graphfc/data.hpp"

namespace graphfc {

struct SynthConfig {
    std::size_t n_transactions = 10000;
    std::size_t n_importers = 500;
    std::size_t n_hs_codes = 100;
    double base_illicit_rate = 0.0412;  // target population illicit fraction
    double importer_effect = 1.5;       // logit weight of importer latent risk
    double hs_effect = 0.8;             // logit weight of HS-code latent risk
    double feature_noise = 0.5;         // stddev of idiosyncratic logit noise
    DateDays start_date = make_date(2016, 1, 1);
    DateDays end_date = make_date(2019, 12, 31);
    std::uint64_t seed = 1;
};

namespace synth_detail {

// Fixed structural constants of the generator (not tunable knobs: changing
// them changes what "the synthetic benchmark" means).
inline constexpr double kFeatureLogitWeight = -1.0;  // g(z) = -z on standardized log unit value
inline constexpr double kPriceShiftPerRisk = 0.5;    // risky importers declare lower prices
inline constexpr double kLogUnitValueNoise = 0.6;
inline constexpr double kUndervalueLo = 0.1;  // undervaluation fraction of true value
inline constexpr double kUndervalueHi = 0.5;
inline constexpr double kZipfExponent = 0.0;  // importer/HS activity skew (0 = uniform)

// Cumulative Zipf(s) weights over [0, n).
inline std::vector<double> zipf_cdf(std::size_t n, double s) {
    std::vector<double> cum(n);
    double total = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        total += 1.0 / std::pow(static_cast<double>(k + 1), s);
        cum[k] = total;
    }
    for (auto& c : cum) c /= total;
    return cum;
}

inline std::size_t zipf_draw(const std::vector<double>& cdf, Rng& rng) {
    const double u = rng.uniform();
    const auto it = std::lower_bound(cdf.begin(), cdf.end(), u);
    return it == cdf.end() ? cdf.size() - 1 : static_cast<std::size_t>(it - cdf.begin());
}

// Solves for the logit intercept b so the population mean of
// sigmoid(b + risk_i) hits the configured illicit rate. With all effects zero
// this reduces to b = logit(rate) exactly.
inline double calibrate_intercept(const std::vector<double>& risk, double rate) {
    double lo = -40.0, hi = 40.0;
    for (int it = 0; it < 100; ++it) {
        const double mid = 0.5 * (lo + hi);
        double mean = 0.0;
        for (double r : risk) mean += sigmoid(mid + r);
        mean /= static_cast<double>(risk.size());
        if (mean < rate) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    return 0.5 * (lo + hi);
}

inline std::string padded_id(const char* prefix, std::size_t idx, int width) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s%0*zu", prefix, width, idx);
    return buf;
}

}  // namespace synth_detail

inline Dataset generate_synthetic(const SynthConfig& cfg) {
    using namespace synth_detail;
    if (cfg.n_transactions == 0) throw ConfigError("n_transactions must be > 0");
    if (cfg.n_importers == 0 || cfg.n_hs_codes == 0) {
        throw ConfigError("n_importers and n_hs_codes must be > 0");
    }
    if (cfg.base_illicit_rate < 0.0 || cfg.base_illicit_rate >= 1.0) {
        throw ConfigError("base_illicit_rate must be in [0, 1)");
    }
    if (cfg.importer_effect < 0.0 || cfg.hs_effect < 0.0 || cfg.feature_noise < 0.0) {
        throw ConfigError("effect strengths and feature_noise must be >= 0");
    }
    if (cfg.start_date > cfg.end_date) throw ConfigError("start_date must be <= end_date");

    // Entity-level latents on their own streams so entity counts, not
    // transaction count, determine them.
    Rng imp_rng(derive_seed(cfg.seed, "synth/importers"));
    std::vector<double> imp_risk(cfg.n_importers);
    for (auto& u : imp_risk) u = imp_rng.normal();

    Rng hs_rng(derive_seed(cfg.seed, "synth/hs"));
    std::vector<double> hs_risk(cfg.n_hs_codes), hs_log_price(cfg.n_hs_codes),
        hs_tariff(cfg.n_hs_codes);
    for (std::size_t c = 0; c < cfg.n_hs_codes; ++c) {
        hs_risk[c] = hs_rng.normal();
        hs_log_price[c] = hs_rng.normal(3.0, 1.0);
        hs_tariff[c] = hs_rng.uniform(0.02, 0.30);
    }

    const auto imp_cdf = zipf_cdf(cfg.n_importers, kZipfExponent);
    const auto hs_cdf = zipf_cdf(cfg.n_hs_codes, kZipfExponent);

    Dataset d;
    d.records.resize(cfg.n_transactions);
    std::vector<double> log_uv(cfg.n_transactions);
    std::vector<std::size_t> imp_of(cfg.n_transactions), hs_of(cfg.n_transactions);

    Rng txn_rng(derive_seed(cfg.seed, "synth/transactions"));
    const auto day_span = static_cast<std::uint64_t>(cfg.end_date - cfg.start_date) + 1;
    for (std::size_t t = 0; t < cfg.n_transactions; ++t) {
        auto& r = d.records[t];
        const std::size_t i = zipf_draw(imp_cdf, txn_rng);
        const std::size_t c = zipf_draw(hs_cdf, txn_rng);
        imp_of[t] = i;
        hs_of[t] = c;
        r.txn_id = padded_id("T", t + 1, 8);
        r.importer_id = padded_id("IMP", i + 1, 6);
        r.hs_code = std::to_string(100000 + c);
        r.date = cfg.start_date + static_cast<DateDays>(txn_rng.below(day_span));
        const double qty = std::max(1.0, std::floor(std::exp(txn_rng.normal(2.0, 1.0)) + 0.5));
        log_uv[t] = hs_log_price[c] - kPriceShiftPerRisk * imp_risk[i] +
                    txn_rng.normal(0.0, kLogUnitValueNoise);
        r.quantity = qty;
        r.declared_value = qty * std::exp(log_uv[t]);
        r.gross_weight = qty * std::exp(txn_rng.normal(0.5, 0.4));
        r.tariff_rate = hs_tariff[c];
        r.paid_tax = r.declared_value * r.tariff_rate;
    }

    // Standardize log unit value over the generated population, then assemble
    // per-row risk scores.
    double mean_uv = 0.0;
    for (double v : log_uv) mean_uv += v;
    mean_uv /= static_cast<double>(cfg.n_transactions);
    double var_uv = 0.0;
    for (double v : log_uv) var_uv += (v - mean_uv) * (v - mean_uv);
    var_uv /= static_cast<double>(cfg.n_transactions);
    const double sd_uv = var_uv > 0.0 ? std::sqrt(var_uv) : 1.0;

    Rng noise_rng(derive_seed(cfg.seed, "synth/noise"));
    std::vector<double> risk(cfg.n_transactions);
    for (std::size_t t = 0; t < cfg.n_transactions; ++t) {
        const double z = (log_uv[t] - mean_uv) / sd_uv;
        risk[t] = cfg.importer_effect * imp_risk[imp_of[t]] + cfg.hs_effect * hs_risk[hs_of[t]] +
                  kFeatureLogitWeight * z + cfg.feature_noise * noise_rng.normal();
    }

    Rng outcome_rng(derive_seed(cfg.seed, "synth/outcomes"));
    if (cfg.base_illicit_rate == 0.0) {
        for (auto& r : d.records) {
            r.has_outcome = true;
            r.illicit = false;
            r.raised_revenue = 0.0;
        }
    } else {
        const double intercept = calibrate_intercept(risk, cfg.base_illicit_rate);
        for (std::size_t t = 0; t < cfg.n_transactions; ++t) {
            auto& r = d.records[t];
            r.has_outcome = true;
            r.illicit = outcome_rng.uniform() < sigmoid(intercept + risk[t]);
            if (r.illicit) {
                // Declared value understates the true value by fraction f, so
                // the recovered duty is tariff * declared * f / (1 - f).
                const double f = outcome_rng.uniform(kUndervalueLo, kUndervalueHi);
                r.raised_revenue = r.tariff_rate * r.declared_value * f / (1.0 - f);
            } else {
                r.raised_revenue = 0.0;
            }
        }
    }

    d.reset_tags();
    return d;
}

}  // namespace graphfc
