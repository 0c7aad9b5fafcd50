/* tslint:disable */
/* eslint-disable */

/**
 * Handle held by the page.
 */
export class WebModel {
    free(): void;
    [Symbol.dispose](): void;
    knn(label: string, k: number): string;
    constructor(scenes: number, clusters: number, per_cluster: number, dim: number, epochs: number, seed: number);
    pca(): string;
    project(a: string, b: string): string;
    summary(): string;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_webmodel_free: (a: number, b: number) => void;
    readonly webmodel_knn: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly webmodel_new: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
    readonly webmodel_pca: (a: number) => [number, number, number, number];
    readonly webmodel_project: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly webmodel_summary: (a: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
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
