#pragma once

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "slimrec/config.hpp"
#include "slimrec/data.hpp"
#include "slimrec/flops.hpp"
#include "slimrec/metrics.hpp"
#include "slimrec/search.hpp"
#include "slimrec/serialize.hpp"
#include "slimrec/supernet.hpp"

namespace slimrec {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Artifact files
// ---------------------------------------------------------------------------

inline std::string descriptor_to_json(const ArchChoice& c, uint64_t seed) {
    json j;
    j["candidate_index"] = c.candidate + 1;  // 1-based, matching the config's candidate list
    j["gamma"] = c.gamma;
    j["gamma_prime"] = c.gamma_prime;
    j["d_eff"] = c.d_eff;
    j["D_eff"] = c.D_eff;
    j["layers"] = c.depth;
    j["flops"] = c.flops;
    j["seed"] = seed;
    return j.dump(2) + "\n";
}

inline ArchChoice descriptor_from_json(const std::string& text, uint64_t* seed_out = nullptr) {
    json j = json::parse(text);
    ArchChoice c;
    c.candidate = j.at("candidate_index").get<int>() - 1;
    c.gamma = j.at("gamma").get<double>();
    c.gamma_prime = j.at("gamma_prime").get<double>();
    c.d_eff = j.at("d_eff").get<int>();
    c.D_eff = j.at("D_eff").get<int>();
    c.depth = j.at("layers").get<int>();
    c.flops = j.at("flops").get<int64_t>();
    if (seed_out) *seed_out = j.at("seed").get<uint64_t>();
    return c;
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open " + path);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline std::string search_log_csv(const SearchResult& r, int m, int L) {
    std::string out = "t,tau,L_t,L_CE,L_RC";
    for (int i = 1; i <= m; ++i) out += ",p" + std::to_string(i);
    for (int j = 1; j <= L; ++j) out += ",q" + std::to_string(j);
    out += "\n";
    for (const auto& il : r.log) {
        out += std::to_string(il.t) + "," + fmt_real(il.tau) + "," + std::to_string(il.dynamic_depth) + "," +
               fmt_real(il.ce) + "," + fmt_real(il.rc);
        for (real p : il.p) out += "," + fmt_real(p);
        for (real q : il.q) out += "," + fmt_real(q);
        out += "\n";
    }
    return out;
}

inline std::string metrics_to_json(const MetricsReport& r) {
    json j;
    j["recall_at_k"] = r.recall;
    j["mrr_at_k"] = r.mrr;
    j["ndcg_at_k"] = r.ndcg;
    j["k"] = r.k;
    j["examples"] = r.examples;
    return j.dump(2) + "\n";
}

// Results ledger: one row per evaluation, appended read-modify-write so the
// file is always complete.
inline void append_results_row(const std::string& path, const std::string& run_id, const std::string& tag,
                               const std::string& split, const MetricsReport& r, int64_t flops, uint64_t seed) {
    std::string header = "run_id,tag,split,k,recall,mrr,ndcg,flops,seed\n";
    std::string existing;
    if (std::filesystem::exists(path)) existing = read_text_file(path);
    if (existing.empty()) existing = header;
    existing += run_id + "," + tag + "," + split + "," + std::to_string(r.k) + "," + fmt_real(r.recall) + "," +
                fmt_real(r.mrr) + "," + fmt_real(r.ndcg) + "," + std::to_string(flops) + "," +
                std::to_string(seed) + "\n";
    atomic_write(path, existing);
}

// ---------------------------------------------------------------------------
// Shared stage plumbing
// ---------------------------------------------------------------------------

struct RunContext {
    RunConfig cfg;
    std::string out_dir;
    std::string dataset_path;
    std::string dataset_hash;
    std::string run_id;
    InteractionDataset dataset;
    SplitSpec split;
};

inline RunContext open_run(const RunConfig& cfg, bool needs_dataset = true) {
    RunContext ctx;
    ctx.cfg = cfg;
    ctx.out_dir = cfg.str("out_dir");
    if (ctx.out_dir.empty()) throw ConfigError("out_dir is required");
    std::filesystem::create_directories(ctx.out_dir);
    if (needs_dataset) {
        ctx.dataset_path = cfg.str("dataset");
        if (ctx.dataset_path.empty()) throw ConfigError("dataset is required");
        ctx.dataset = load_interactions(ctx.dataset_path);
        ctx.split = leave_one_out_split(ctx.dataset);
        ctx.dataset_hash = content_hash_of_file(ctx.dataset_path);
    }
    std::string stamp = cfg.render() + "\ndataset_hash = " + ctx.dataset_hash + "\n";
    char idbuf[24];
    std::snprintf(idbuf, sizeof idbuf, "%016llx",
                  static_cast<unsigned long long>(fnv1a_hash(stamp.data(), stamp.size())));
    ctx.run_id = idbuf;
    atomic_write(ctx.out_dir + "/config.resolved", stamp);
    return ctx;
}

inline std::string path_in(const RunContext& ctx, const std::string& name) { return ctx.out_dir + "/" + name; }

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline void cmd_prepare_data(const RunConfig& cfg, std::ostream& out) {
    RunContext ctx = open_run(cfg);
    json sidecar;
    sidecar["user_names"] = ctx.dataset.user_names;
    sidecar["item_names"] = std::vector<std::string>(ctx.dataset.item_names.begin() + 1, ctx.dataset.item_names.end());
    atomic_write(path_in(ctx, "id_map.json"), sidecar.dump(2) + "\n");

    std::string tsv;
    for (size_t u = 0; u < ctx.dataset.sequences.size(); ++u) {
        const auto& seq = ctx.dataset.sequences[u];
        for (size_t t = 0; t < seq.size(); ++t)
            tsv += std::to_string(u) + "\t" + std::to_string(seq[t]) + "\t" + std::to_string(t) + "\n";
    }
    atomic_write(path_in(ctx, "interactions.tsv"), tsv);

    json summary;
    summary["users"] = ctx.dataset.user_count;
    summary["items"] = ctx.dataset.item_count;
    summary["val_examples"] = ctx.split.val_target.size();
    summary["test_examples"] = ctx.split.test_target.size();
    atomic_write(path_in(ctx, "split_summary.json"), summary.dump(2) + "\n");
    out << "prepared " << ctx.dataset.user_count << " users, " << ctx.dataset.item_count << " items -> "
        << ctx.out_dir << "\n";
}

struct SearchArtifacts {
    SearchResult result;
    SupernetConfig net_cfg;
};

inline SearchArtifacts run_search_stage(RunContext& ctx, std::ostream& out) {
    SupernetConfig net_cfg = ctx.cfg.supernet_config();
    TrainConfig tc = ctx.cfg.train_config();
    Supernet net;
    net.cfg = net_cfg;
    net.init(ctx.dataset.item_count, tc.seed);
    for (const auto& w : net.mask_warnings) std::cerr << "warning: " << w << "\n";

    SearchResult result = search(net, ctx.split, tc);

    atomic_write(path_in(ctx, "descriptor.json"), descriptor_to_json(result.choice, tc.seed));
    atomic_write(path_in(ctx, "search_log.csv"), search_log_csv(result, net_cfg.m(), net_cfg.L));
    std::vector<const Parameter*> to_save;
    for (Parameter* p : net.weight_params()) to_save.push_back(p);
    for (Parameter* p : net.arch_param_list()) to_save.push_back(p);
    write_checkpoint(path_in(ctx, "checkpoint.bin"), to_save);

    out << "search: candidate " << (result.choice.candidate + 1) << " (gamma=" << result.choice.gamma
        << ", gamma'=" << result.choice.gamma_prime << "), depth " << result.choice.depth << ", flops "
        << result.choice.flops << ", epochs " << result.epochs_run << ", " << fmt_real_short(result.wall_seconds)
        << "s\n";
    return SearchArtifacts{std::move(result), net_cfg};
}

inline void cmd_search(const RunConfig& cfg, std::ostream& out) {
    RunContext ctx = open_run(cfg);
    run_search_stage(ctx, out);
}

// Rebuilds the supernet skeleton, restores the searched weights, and
// validates the descriptor against the checkpoint before any compute.
inline CompactModel load_compact_from_search(RunContext& ctx, ArchChoice& choice_out, uint64_t& search_seed) {
    SupernetConfig net_cfg = ctx.cfg.supernet_config();
    ArchChoice choice = descriptor_from_json(read_text_file(path_in(ctx, "descriptor.json")), &search_seed);
    if (choice.candidate < 0 || choice.candidate >= net_cfg.m())
        throw ConfigError("descriptor candidate_index is outside this config's candidate list");
    if (choice.depth < 1 || choice.depth > net_cfg.L)
        throw ConfigError("descriptor layer count is outside this config's depth range");
    MaskSpec m = make_mask(net_cfg.gammas[static_cast<size_t>(choice.candidate)],
                           net_cfg.gamma_primes[static_cast<size_t>(choice.candidate)], net_cfg.d, net_cfg.D,
                           net_cfg.heads);
    if (m.d_eff != choice.d_eff || m.D_eff != choice.D_eff)
        throw ConfigError("descriptor effective widths do not match this config's masks");

    Supernet net;
    net.cfg = net_cfg;
    net.init(ctx.dataset.item_count, search_seed);
    auto stored = read_checkpoint(path_in(ctx, "checkpoint.bin"));
    std::vector<Parameter*> all = net.weight_params();
    for (Parameter* p : net.arch_param_list()) all.push_back(p);
    restore_parameters(stored, all);

    choice_out = choice;
    return build_compact_model(net, choice);
}

inline void cmd_retrain(const RunConfig& cfg, std::ostream& out) {
    RunContext ctx = open_run(cfg);
    ArchChoice choice;
    uint64_t search_seed = 0;
    CompactModel compact = load_compact_from_search(ctx, choice, search_seed);

    TrainConfig tc = ctx.cfg.train_config();
    RetrainResult rr = retrain(compact, ctx.split, tc);

    std::vector<const Parameter*> to_save;
    for (Parameter* p : compact.params()) to_save.push_back(p);
    write_checkpoint(path_in(ctx, "compact_checkpoint.bin"), to_save);

    json j;
    j["epoch0_val"] = json::parse(metrics_to_json(rr.epoch0_val));
    j["best_val"] = json::parse(metrics_to_json(rr.best_val));
    j["epochs_run"] = rr.epochs_run;
    j["stopped_early"] = rr.stopped_early;
    atomic_write(path_in(ctx, "retrain_metrics.json"), j.dump(2) + "\n");
    out << "retrain: epochs " << rr.epochs_run << ", best val recall@" << rr.best_val.k << " "
        << fmt_real_short(rr.best_val.recall) << "\n";
}

inline void cmd_evaluate(const RunConfig& cfg, std::ostream& out) {
    RunContext ctx = open_run(cfg);
    ArchChoice choice;
    uint64_t search_seed = 0;
    CompactModel compact = load_compact_from_search(ctx, choice, search_seed);
    auto stored = read_checkpoint(path_in(ctx, "compact_checkpoint.bin"));
    restore_parameters(stored, compact.params());

    EvalOptions eo;
    eo.k = compact.top_k;
    eo.exclude_seen = cfg.flag("exclude_seen");
    auto scorer = [&](const SequenceBatch& b) { return compact.score_batch(b); };
    MetricsReport val = evaluate_ranking(ctx.split, BatchPurpose::Val, compact.seq_len, eo, scorer);
    MetricsReport test = evaluate_ranking(ctx.split, BatchPurpose::Test, compact.seq_len, eo, scorer);

    json j;
    j["val"] = json::parse(metrics_to_json(val));
    j["test"] = json::parse(metrics_to_json(test));
    j["flops"] = choice.flops;
    atomic_write(path_in(ctx, "evaluation.json"), j.dump(2) + "\n");
    const std::string tag = cfg.str("run_tag");
    append_results_row(path_in(ctx, "results.csv"), ctx.run_id, tag, "val", val, choice.flops, cfg.uinteger("seed"));
    append_results_row(path_in(ctx, "results.csv"), ctx.run_id, tag, "test", test, choice.flops, cfg.uinteger("seed"));
    out << "evaluate: val recall@" << val.k << " " << fmt_real_short(val.recall) << ", test recall@" << test.k
        << " " << fmt_real_short(test.recall) << "\n";
}

inline void cmd_flops_report(const RunConfig& cfg, std::ostream& out) {
    RunContext ctx = open_run(cfg, /*needs_dataset=*/false);
    SupernetConfig net_cfg = cfg.supernet_config();
    FlopsTable table = build_flops_table(net_cfg, net_cfg.N);
    std::string csv = "candidate,layer,flops\n";
    for (int i = 0; i < table.m; ++i)
        for (int l = 0; l < table.L; ++l)
            csv += std::to_string(i + 1) + "," + std::to_string(l + 1) + "," + std::to_string(table.at(i, l)) + "\n";
    atomic_write(path_in(ctx, "flops.csv"), csv);
    out << "flops table: " << table.m << " candidates x " << table.L << " layers -> " << path_in(ctx, "flops.csv")
        << "\n";
}

inline void cmd_run_all(const RunConfig& cfg, std::ostream& out) {
    cmd_prepare_data(cfg, out);
    cmd_search(cfg, out);
    cmd_retrain(cfg, out);
    cmd_evaluate(cfg, out);
}

inline void cmd_sweep_lambda(const RunConfig& cfg, std::ostream& out) {
    RunContext ctx = open_run(cfg);
    std::vector<double> lambdas = cfg.numbers("lambdas");
    if (lambdas.empty()) throw ConfigError("sweep-lambda needs a lambda list");
    std::vector<int64_t> seeds = cfg.integers("sweep_seeds");
    if (seeds.empty()) {
        int64_t base = static_cast<int64_t>(cfg.uinteger("seed"));
        seeds = {base, base + 1, base + 2};
    }
    const bool with_retrain = cfg.flag("sweep_retrain");

    std::string runs_csv = "lambda,seed,candidate_index,layers,flops";
    if (with_retrain) runs_csv += ",val_recall,test_recall";
    runs_csv += "\n";
    std::map<std::string, std::vector<int64_t>> flops_by_lambda;
    std::vector<std::string> lambda_order;

    for (double lam : lambdas) {
        std::string lam_key = fmt_real_short(lam);
        lambda_order.push_back(lam_key);
        for (int64_t s : seeds) {
            RunConfig sub = cfg;
            sub.values["lambda"] = lam_key;
            sub.values["seed"] = std::to_string(s);
            sub.values["out_dir"] = ctx.out_dir + "/lambda_" + lam_key + "/seed_" + std::to_string(s);
            RunContext subctx = open_run(sub);
            SearchArtifacts art = run_search_stage(subctx, out);
            const ArchChoice& c = art.result.choice;
            runs_csv += lam_key + "," + std::to_string(s) + "," + std::to_string(c.candidate + 1) + "," +
                        std::to_string(c.depth) + "," + std::to_string(c.flops);
            if (with_retrain) {
                cmd_retrain(sub, out);
                cmd_evaluate(sub, out);
                json ev = json::parse(read_text_file(subctx.out_dir + "/evaluation.json"));
                runs_csv += "," + fmt_real(ev["val"]["recall_at_k"].get<double>()) + "," +
                            fmt_real(ev["test"]["recall_at_k"].get<double>());
            }
            runs_csv += "\n";
            flops_by_lambda[lam_key].push_back(c.flops);
        }
    }
    atomic_write(path_in(ctx, "sweep_runs.csv"), runs_csv);

    std::string summary = "lambda,median_flops\n";
    for (const std::string& lam_key : lambda_order) {
        auto f = flops_by_lambda[lam_key];
        std::sort(f.begin(), f.end());
        int64_t median = f[f.size() / 2];
        if (f.size() % 2 == 0) median = (f[f.size() / 2 - 1] + f[f.size() / 2]) / 2;
        summary += lam_key + "," + std::to_string(median) + "\n";
    }
    atomic_write(path_in(ctx, "sweep_summary.csv"), summary);
    out << "lambda sweep -> " << path_in(ctx, "sweep_summary.csv") << "\n";
}

inline void cmd_sweep_gate_depth(const RunConfig& cfg, std::ostream& out) {
    RunContext ctx = open_run(cfg);
    std::vector<int64_t> depths = cfg.integers("gate_depths");
    if (depths.empty()) throw ConfigError("sweep-gate-depth needs a gate depth list");

    SupernetConfig base_cfg = cfg.supernet_config();
    std::string csv = "gate_depth,val_recall,val_mrr,val_ndcg,test_recall,test_mrr,test_ndcg,selected_flops,"
                      "full_arch_flops\n";
    for (int64_t ld : depths) {
        RunConfig sub = cfg;
        sub.values["gate_depth"] = std::to_string(ld);
        sub.values["out_dir"] = ctx.out_dir + "/gate_depth_" + std::to_string(ld);
        RunContext subctx = open_run(sub);
        SearchArtifacts art = run_search_stage(subctx, out);
        cmd_retrain(sub, out);
        cmd_evaluate(sub, out);
        json ev = json::parse(read_text_file(subctx.out_dir + "/evaluation.json"));
        // FLOPs of one fixed reference architecture (the unpruned candidate
        // at full depth) at this gate depth: isolates the gates' own cost.
        int64_t fixed = flops_of_candidate(base_cfg, base_cfg.gammas[0], base_cfg.gamma_primes[0], base_cfg.N,
                                           static_cast<int>(ld)) *
                        base_cfg.L;
        csv += std::to_string(ld) + "," + fmt_real(ev["val"]["recall_at_k"].get<double>()) + "," +
               fmt_real(ev["val"]["mrr_at_k"].get<double>()) + "," + fmt_real(ev["val"]["ndcg_at_k"].get<double>()) +
               "," + fmt_real(ev["test"]["recall_at_k"].get<double>()) + "," +
               fmt_real(ev["test"]["mrr_at_k"].get<double>()) + "," + fmt_real(ev["test"]["ndcg_at_k"].get<double>()) +
               "," + std::to_string(art.result.choice.flops) + "," + std::to_string(fixed) + "\n";
    }
    atomic_write(path_in(ctx, "gate_depth_summary.csv"), csv);
    out << "gate-depth sweep -> " << path_in(ctx, "gate_depth_summary.csv") << "\n";
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

inline std::string usage_text() {
    std::string u =
        "usage: slimrec <command> [--config FILE] [--<key> VALUE ...]\n"
        "\n"
        "commands:\n"
        "  prepare-data      ingest interactions, build the leave-one-out split\n"
        "  search            run the bilevel architecture search\n"
        "  retrain           reconstruct the selected architecture and retrain it\n"
        "  evaluate          rank held-out items with the retrained model\n"
        "  flops-report      dump the per-candidate FLOPs table as CSV\n"
        "  run-all           prepare-data + search + retrain + evaluate\n"
        "  sweep-lambda      search across a lambda grid (positional: comma list)\n"
        "  sweep-gate-depth  full pipeline across gate depths\n"
        "\n"
        "configuration keys (also accepted as --key value flags):\n";
    for (const auto& k : config_schema()) {
        u += "  --" + k.name;
        for (size_t i = k.name.size(); i < 20; ++i) u += ' ';
        u += k.help;
        if (!k.default_value.empty()) u += " [" + k.default_value + "]";
        u += "\n";
    }
    return u;
}

inline int dispatch(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    try {
        if (args.empty() || args[0] == "--help" || args[0] == "-h" || args[0] == "help") {
            out << usage_text();
            return args.empty() ? 1 : 0;
        }
        std::string command = args[0];
        RunConfig cfg = default_config();
        std::vector<std::string> positional;

        // --config files apply first, then flag overrides, positionals last.
        std::vector<std::pair<std::string, std::string>> overrides;
        for (size_t i = 1; i < args.size(); ++i) {
            std::string a = args[i];
            if (a == "--help" || a == "-h") {
                out << usage_text();
                return 0;
            }
            if (a.rfind("--", 0) == 0) {
                std::string key = a.substr(2);
                std::string value;
                size_t eq = key.find('=');
                if (eq != std::string::npos) {
                    value = key.substr(eq + 1);
                    key = key.substr(0, eq);
                } else {
                    if (i + 1 >= args.size()) throw ConfigError("flag --" + key + " needs a value");
                    value = args[++i];
                }
                std::replace(key.begin(), key.end(), '-', '_');
                if (key == "config")
                    load_config_file(cfg, value);
                else
                    overrides.emplace_back(key, value);
            } else {
                positional.push_back(a);
            }
        }
        for (const auto& [k, v] : overrides) apply_config_line(cfg, k, v, "command line");
        if (!positional.empty()) {
            if (command == "sweep-lambda")
                apply_config_line(cfg, "lambdas", positional[0], "command line");
            else if (command == "sweep-gate-depth")
                apply_config_line(cfg, "gate_depths", positional[0], "command line");
            else
                throw UsageError("unexpected argument '" + positional[0] + "'");
            if (positional.size() > 1) throw UsageError("unexpected argument '" + positional[1] + "'");
        }

        if (command == "prepare-data") cmd_prepare_data(cfg, out);
        else if (command == "search") cmd_search(cfg, out);
        else if (command == "retrain") cmd_retrain(cfg, out);
        else if (command == "evaluate") cmd_evaluate(cfg, out);
        else if (command == "flops-report") cmd_flops_report(cfg, out);
        else if (command == "run-all") cmd_run_all(cfg, out);
        else if (command == "sweep-lambda") cmd_sweep_lambda(cfg, out);
        else if (command == "sweep-gate-depth") cmd_sweep_gate_depth(cfg, out);
        else {
            err << "unknown command '" << command << "' (try --help)\n";
            return 2;
        }
        return 0;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace slimrec
