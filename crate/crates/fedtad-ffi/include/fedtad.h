/* C interface for the fedtad subgraph federated learning simulator.
 *
 * All handles are opaque. Fallible calls return a fedtad_status; when a call
 * fails, fedtad_last_error() returns a thread-local message that stays valid
 * until the next failing call on the same thread.
 */

#ifndef FEDTAD_H
#define FEDTAD_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum fedtad_status {
  FEDTAD_OK = 0,
  FEDTAD_NULL_ARGUMENT = 1,
  FEDTAD_INVALID_UTF8 = 2,
  FEDTAD_IO = 3,
  FEDTAD_PARSE = 4,
  FEDTAD_CONFIG = 5,
  FEDTAD_GRAPH = 6,
  FEDTAD_NUMERIC = 7,
  FEDTAD_INTERNAL = 8,
} fedtad_status;

/* Opaque handle to a loaded dataset. */
typedef struct FedtadDataset FedtadDataset;

/* Opaque handle to a set of client shards induced from a dataset. */
typedef struct FedtadPartition FedtadPartition;

/* Last error message for the calling thread. Never NULL; empty string when
 * no error has occurred. Do not free. */
const char *fedtad_last_error(void);

/* Load a dataset JSON file. On success *out receives a handle that must be
 * released with fedtad_dataset_free. */
fedtad_status fedtad_dataset_load(const char *path, FedtadDataset **out);

void fedtad_dataset_free(FedtadDataset *ds);

size_t fedtad_dataset_num_nodes(const FedtadDataset *ds);
size_t fedtad_dataset_num_edges(const FedtadDataset *ds);
size_t fedtad_dataset_num_classes(const FedtadDataset *ds);

/* Partition a dataset into `clients` shards via Louvain communities, using
 * the default 20/40/40 train/val/test split. Release the handle with
 * fedtad_partition_free. */
fedtad_status fedtad_partition_create(const FedtadDataset *ds,
                                      size_t clients,
                                      uint64_t seed,
                                      FedtadPartition **out);

void fedtad_partition_free(FedtadPartition *p);

size_t fedtad_partition_num_clients(const FedtadPartition *p);

/* Node count of one shard; 0 if the index is out of range. */
size_t fedtad_partition_shard_nodes(const FedtadPartition *p, size_t client);

/* Compute one client's class-wise knowledge reliability into phi_out, which
 * must hold at least phi_len doubles and phi_len must be at least the class
 * count of the dataset. */
fedtad_status fedtad_partition_reliability(const FedtadPartition *p,
                                           size_t client,
                                           size_t walk_length,
                                           double *phi_out,
                                           size_t phi_len);

/* Run a full experiment described by a config file, writing metrics.csv
 * under out_dir. If final_acc_out is non-NULL it receives the final global
 * test accuracy. */
fedtad_status fedtad_run_experiment(const char *config_path,
                                    const char *out_dir,
                                    double *final_acc_out);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* FEDTAD_H */
