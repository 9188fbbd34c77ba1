#pragma once

#include <string>
#include <vector>

#include "asyncfm/bench.hpp"

namespace asyncfm {

// Implementation of the CLI subcommands. Paths are resolved against the
// ASYNCFM_OUT directory when relative and the variable is set. All outputs
// are deterministic for fixed inputs; wall-clock timing sidecars are the
// only exception.

std::string resolve_out_path(const std::string& path);

void cmd_gen_data(const std::string& config_path, const std::string& out_path);

void cmd_train(const std::string& config_path, const std::string& data_path,
               const std::string& out_ckpt);

void cmd_train_rater(const std::string& config_path, const std::string& data_path,
                     const std::string& backbone_ckpt, const std::string& out_ckpt);

void cmd_infer(const std::string& ckpt_path, const std::string& data_path, int episode_index,
               const std::string& mode, const std::string& out_path);

void cmd_eval(const std::string& ckpt_path, const std::string& data_path,
              const std::string& mode, const std::string& out_path);

void cmd_self_correct(const std::string& ckpt_path, const std::string& data_path,
                      double scale, const std::string& kind,
                      const std::vector<int>& indices, const std::string& out_path);

void cmd_data_efficiency(const std::string& config_path, double fraction, int epochs,
                         const std::vector<uint64_t>& seeds, const std::string& out_path);

}  // namespace asyncfm
