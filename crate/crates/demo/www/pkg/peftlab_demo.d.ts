/* tslint:disable */
/* eslint-disable */

/**
 * One head's attention over a random prompt and the encoded text, on a
 * small untrained encoder. `scale` is the standard deviation of the prompt
 * entries.
 */
export function attention_map(text: string, pl: number, scale: number, layer: number, head: number): string;

/**
 * Mixture weights for comma- or space-separated scores: squared-score
 * normalization next to a softmax over the same scores.
 */
export function mixture_weights(scores: string): string;

/**
 * Reports from `patients` synthetic patients.
 */
export function sample_reports(seed: bigint, patients: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly attention_map: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number];
    readonly mixture_weights: (a: number, b: number) => [number, number];
    readonly sample_reports: (a: bigint, b: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
