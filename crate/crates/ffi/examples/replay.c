/* Replays a selection trace and prints it.
 *
 *   cc examples/replay.c -Iinclude -L../../target/debug -laggssl_ffi -o replay
 */
#include <stdio.h>
#include "aggssl.h"

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: %s TRACE.csv\n", argv[0]);
        return 2;
    }
    AggsslTrace *trace = NULL;
    AggsslStatus st = aggssl_replay(argv[1], &trace);
    if (st != AGGSSL_STATUS_OK) {
        fprintf(stderr, "error %d: %s\n", (int)st, aggssl_last_error());
        return 1;
    }
    size_t n = aggssl_trace_len(trace);
    for (size_t i = 0; i < n; i++) {
        const char *task;
        double acc;
        bool kept;
        aggssl_trace_iteration(trace, i, &task, &acc, &kept);
        printf("%zu %s %.2f %s\n", i + 1, task, acc, kept ? "kept" : "rejected");
    }
    double best;
    size_t pool;
    aggssl_trace_summary(trace, &best, &pool);
    printf("best %.2f pool %zu\n", best, pool);
    aggssl_trace_free(trace);
    return 0;
}
